"""Synthetic rule-following task and corpora.

Each sample carries a system prompt holding one rule token R_k, user
content, and a response whose reference is fully determined by (rule,
content): the response must lead with R_k. The adversarial variant
plants a counter-rule token R_j (j != k) inside the user content; the
reference still follows the system rule, which is exactly the
system-versus-user priority conflict the adapters are meant to resolve.

The rule varies per sample, so nothing can be memorized: the model has
to read the rule out of the system span at inference time.

A separate echo corpus (user content repeated by the assistant, no
system span, no rule semantics) pretrains the backbone so it is
competent at the chat format but rule-agnostic.
"""

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .spans import CHATML, BatchBounds, detect_span
from .tokenizer import N_RULES, ToyTokenizer


@dataclass
class Sample:
    tokens: np.ndarray
    bounds: tuple
    loss_mask: np.ndarray
    rule_id: int
    response_start: int


class RuleTask:
    """Rule: prefix the response with the system's rule token."""

    def __init__(self, tokenizer=None, min_content=3, max_content=8, max_t=64):
        self.tokenizer = tokenizer or ToyTokenizer()
        self.min_content = min_content
        self.max_content = max_content
        self.max_t = max_t

    def reference_response(self, rule_id, content_ids):
        """Target token ids for a sample; deterministic in (rule, content)."""
        return [self.tokenizer.rule_token_id(rule_id)]

    def draw_content(self, rng, adversarial, rule_id):
        n = int(rng.integers(self.min_content, self.max_content + 1))
        content = [int(rng.choice(self.tokenizer.content_ids)) for _ in range(n)]
        if adversarial:
            counter = (rule_id + 1 + int(rng.integers(N_RULES - 1))) % N_RULES
            content[int(rng.integers(n))] = self.tokenizer.rule_token_id(counter)
        return content

    def build_sample(self, rng, adversarial=False):
        tok = self.tokenizer
        while True:
            rule_id = int(rng.integers(N_RULES))
            content = self.draw_content(rng, adversarial, rule_id)
            strings = (
                ["<|im_start|>", "system", f"R{rule_id}", "<|im_end|>",
                 "<|im_start|>", "user"]
                + tok.decode(content)
                + ["<|im_end|>", "<|im_start|>", "assistant"]
            )
            response = self.reference_response(rule_id, content)
            ids = np.concatenate(
                [tok.encode(strings), np.array(response + [tok.token_id("<|im_end|>")], dtype=np.int64)]
            )
            if len(ids) <= self.max_t:
                break
            self.max_content = max(self.min_content, self.max_content - 1)
        bounds = detect_span(tok.decode(ids), CHATML)
        response_start = len(strings)
        mask = np.zeros(len(ids), dtype=np.int64)
        mask[response_start:] = 1
        return Sample(
            tokens=ids,
            bounds=bounds.as_tuple(),
            loss_mask=mask,
            rule_id=rule_id,
            response_start=response_start,
        )

    def prompt_of(self, sample):
        """Tokens up to the position where the response should begin."""
        return sample.tokens[: sample.response_start]

    def reference_of(self, sample):
        return sample.tokens[sample.response_start : len(sample.tokens) - 1]


def generate_corpus(task, n_samples, seed, adversarial_rate=0.3):
    """Deterministic mixed clean/adversarial corpus."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    return [
        task.build_sample(rng, adversarial=bool(rng.random() < adversarial_rate))
        for _ in range(n_samples)
    ]


def generate_echo_corpus(tokenizer, n_samples, seed, min_content=2, max_content=8):
    """Rule-free pretraining data: the assistant repeats the user content.

    Content draws include the rule tokens as ordinary words so every
    embedding row gets trained, but no sample ties a response to a
    system instruction.
    """
    rng = np.random.default_rng(seed)
    pool = np.array(tokenizer.content_ids + tokenizer.rule_ids, dtype=np.int64)
    frame_a = tokenizer.encode(["<|im_start|>", "user"])
    frame_b = tokenizer.encode(["<|im_end|>", "<|im_start|>", "assistant"])
    end = tokenizer.encode(["<|im_end|>"])
    samples = []
    for _ in range(n_samples):
        n = int(rng.integers(min_content, max_content + 1))
        content = rng.choice(pool, size=n)
        ids = np.concatenate([frame_a, content, frame_b, content, end])
        samples.append(
            Sample(
                tokens=ids,
                bounds=(0, 0),
                loss_mask=np.ones(len(ids), dtype=np.int64),
                rule_id=-1,
                response_start=len(frame_a) + n + len(frame_b),
            )
        )
    return samples


def evaluate_adherence(m, task, n_eval, seed, adversarial=False):
    """Fraction of greedy decodes that match the reference response."""
    rng = np.random.default_rng(seed)
    correct = 0
    for _ in range(n_eval):
        sample = task.build_sample(rng, adversarial=adversarial)
        prompt = task.prompt_of(sample)[None, :]
        bounds = BatchBounds(np.array([sample.bounds], dtype=np.int64))
        ref = task.reference_of(sample)
        out = model_mod.generate_greedy(m, prompt, bounds, n_steps=len(ref))
        if np.array_equal(out[0], ref):
            correct += 1
    return correct / n_eval
