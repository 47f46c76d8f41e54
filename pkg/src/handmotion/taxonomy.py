"""Label spaces with deterministic pseudo-text embeddings.

A real deployment would embed label strings with a pretrained text encoder;
here each label gets a seeded-hash-initialized random unit vector,
rejection-resampled until all pairwise cosines stay below a separation
threshold. The construction is byte-reproducible across platforms (SHA-256
seeded PCG64 streams).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SeparationFailure, ShapeMismatch, ZeroVector

COSINE_SEPARATION = 0.5
TEMPERATURE = 0.07


def _label_vector(seed: int, kind: str, label: str, attempt: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{kind}:{label}:{attempt}".encode()).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    vec = rng.standard_normal(dim)
    norm = np.linalg.norm(vec)
    if norm < 1e-9:
        raise ZeroVector("degenerate embedding draw")
    return vec / norm


def _separated_embeddings(labels: list[str], dim: int, seed: int, kind: str) -> np.ndarray:
    out = np.empty((len(labels), dim))
    budget = 10 * max(len(labels), 1)
    attempts = 0
    for i, label in enumerate(labels):
        while True:
            if attempts > budget:
                raise SeparationFailure(
                    f"could not separate {len(labels)} '{kind}' labels in d={dim} within {budget} attempts"
                )
            vec = _label_vector(seed, kind, label, attempts, dim)
            attempts += 1
            if i == 0 or np.max(np.abs(out[:i] @ vec)) < COSINE_SEPARATION:
                out[i] = vec
                break
    return out


@dataclass(frozen=True)
class Taxonomy:
    """Verb x noun action labels with unit-norm pseudo-text embeddings."""

    verbs: tuple
    nouns: tuple
    actions: tuple                      # (verb_id, noun_id, "verb noun") triples
    action_embeddings: np.ndarray       # (N_A, d_text)
    object_embeddings: np.ndarray       # (N_O, d_text)
    verb_embeddings: np.ndarray         # (N_V, d_text)
    d_text: int
    seed: int

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def action_id(self, verb: int, noun: int) -> int:
        return verb * len(self.nouns) + noun

    def action_label(self, action_id: int) -> str:
        return self.actions[action_id][2]

    def to_dict(self) -> dict:
        def hexify(arr):
            return [[float(v).hex() for v in row] for row in np.asarray(arr)]

        return {
            "seed": self.seed,
            "d_text": self.d_text,
            "verbs": list(self.verbs),
            "nouns": list(self.nouns),
            "actions": [list(a) for a in self.actions],
            "action_embeddings": hexify(self.action_embeddings),
            "object_embeddings": hexify(self.object_embeddings),
            "verb_embeddings": hexify(self.verb_embeddings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Taxonomy":
        def unhex(rows):
            return np.array([[float.fromhex(v) for v in row] for row in rows])

        return cls(
            verbs=tuple(data["verbs"]),
            nouns=tuple(data["nouns"]),
            actions=tuple(tuple(a) for a in data["actions"]),
            action_embeddings=unhex(data["action_embeddings"]),
            object_embeddings=unhex(data["object_embeddings"]),
            verb_embeddings=unhex(data["verb_embeddings"]),
            d_text=int(data["d_text"]),
            seed=int(data["seed"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Taxonomy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_taxonomy(verbs, nouns, d_text: int = 64, seed: int = 7) -> Taxonomy:
    """Build the (verb, noun) action space with deterministic embeddings."""
    verbs, nouns = list(verbs), list(nouns)
    if not verbs or not nouns:
        raise ValueError("verbs and nouns must be nonempty")
    if len(set(verbs)) != len(verbs) or len(set(nouns)) != len(nouns):
        raise ValueError("labels must be unique")
    actions = tuple(
        (vi, ni, f"{verb} {noun}") for vi, verb in enumerate(verbs) for ni, noun in enumerate(nouns)
    )
    return Taxonomy(
        verbs=tuple(verbs),
        nouns=tuple(nouns),
        actions=actions,
        action_embeddings=_separated_embeddings([a[2] for a in actions], d_text, seed, "action"),
        object_embeddings=_separated_embeddings(nouns, d_text, seed, "object"),
        verb_embeddings=_separated_embeddings(verbs, d_text, seed, "verb"),
        d_text=d_text,
        seed=seed,
    )


def classify(feature: np.ndarray, candidates: np.ndarray, temperature: float = TEMPERATURE):
    """Nearest label by cosine similarity with softmax probabilities.

    Returns ``(label_index, probabilities)``; probabilities are
    softmax(cos(feature, candidate) / temperature), ties broken toward the
    lowest index (argmax semantics).
    """
    feature = np.asarray(feature, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if feature.ndim != 1 or candidates.ndim != 2 or candidates.shape[1] != feature.shape[0]:
        raise ShapeMismatch(f"feature {feature.shape} vs candidates {candidates.shape}")
    norm = np.linalg.norm(feature)
    if norm < 1e-9:
        raise ZeroVector("cannot classify a zero feature vector")
    cand_norms = np.linalg.norm(candidates, axis=1)
    if np.any(cand_norms < 1e-9):
        raise ZeroVector("zero-norm candidate embedding")
    cos = (candidates @ feature) / (cand_norms * norm)
    logits = cos / temperature
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return int(np.argmax(probs)), probs
