"""Model state: per-class prototype rows and prompt blocks, plus the
structural operations around them (selection, classifier construction,
expansion with freezing, score aggregation, checkpointing).

The prototype matrix is the weight matrix of the cosine "vision classifier";
the encoded prompt/name features form the "text classifier". Rows for classes
introduced by earlier tasks are frozen: training must never change their
bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import encode_text_rows
from .errors import (
    DegenerateClassError,
    DuplicateClassError,
    FormatError,
    ShapeError,
)

CKPT_MAGIC = b"PTPC"
CKPT_VERSION = 1


@dataclass
class Banks:
    """Aligned per-class parameter banks.

    Row k of `prototypes` and block k of `prompts` belong to class_ids[k];
    task_of[k] records the task that introduced the class. Prototype and
    prompt rows freeze independently (prototypes may be frozen from birth
    under the "frozen" prototype-learning ablation).
    """

    d: int
    M: int
    class_ids: list[int] = field(default_factory=list)
    task_of: np.ndarray = None
    prototypes: np.ndarray = None
    proto_frozen: np.ndarray = None
    prompts: np.ndarray = None
    prompt_frozen: np.ndarray = None

    def __post_init__(self):
        if self.task_of is None:
            self.task_of = np.zeros(0, dtype=np.int64)
            self.prototypes = np.zeros((0, self.d))
            self.proto_frozen = np.zeros(0, dtype=bool)
            self.prompts = np.zeros((0, self.M, self.d))
            self.prompt_frozen = np.zeros(0, dtype=bool)
        self._index = {c: k for k, c in enumerate(self.class_ids)}

    @property
    def n_classes(self):
        return len(self.class_ids)

    def row_of(self, class_id):
        return self._index[class_id]

    def has_class(self, class_id):
        return class_id in self._index

    def rows_of_task(self, task_id):
        return np.nonzero(self.task_of == task_id)[0]

    def clone(self):
        other = Banks(d=self.d, M=self.M, class_ids=list(self.class_ids))
        other.task_of = self.task_of.copy()
        other.prototypes = self.prototypes.copy()
        other.proto_frozen = self.proto_frozen.copy()
        other.prompts = self.prompts.copy()
        other.prompt_frozen = self.prompt_frozen.copy()
        return other


def init_prototypes(features_by_class):
    """Normalized per-class feature means, in the given class-id order.

    Args:
        features_by_class: mapping class_id -> (n, d) array of unit-norm
            feature vectors (n >= 1).

    Returns:
        dict class_id -> unit-norm prototype row.
    """
    out = {}
    for cid, feats in features_by_class.items():
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if feats.shape[0] < 1:
            raise DegenerateClassError(f"class {cid} has no features")
        mean = feats.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-9:
            raise DegenerateClassError(f"class {cid} features cancel out (|mean|={norm:.2e})")
        out[cid] = mean / norm
    return out


def select_prompt(z, banks, k0, k1):
    """Pick the prompt paired with the most similar prototype in rows [k0, k1].

    Returns (row index, similarity). Ties break toward the lowest row index.
    """
    if not (0 <= k0 <= k1 < banks.n_classes):
        raise IndexError(f"selection range [{k0},{k1}] invalid for {banks.n_classes} classes")
    rows = banks.prototypes[k0 : k1 + 1]
    z = np.asarray(z, dtype=np.float64)
    sims = rows @ z / (np.linalg.norm(rows, axis=1) * np.linalg.norm(z))
    best = int(np.argmax(sims))  # argmax returns the first (lowest) index on ties
    return k0 + best, float(sims[best])


@dataclass
class TextClassifier:
    """Encoded text features, one unit-norm row per class id.

    y_norms/lam/prompt_row carry what gradient pullbacks need; they are None
    for classifiers built outside a training step.
    """

    weights: np.ndarray
    class_ids: list[int]
    y_norms: np.ndarray = None
    lam: float = None
    prompt_row: int = None

    def row_of(self, class_id):
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise IndexError(f"class {class_id} not in text classifier") from None


def build_text_classifier(enc, prompt_block, lam, class_ids, token_table, prompt_row=None):
    """Encode one selected prompt against every class id's name token."""
    if len(class_ids) == 0:
        raise ShapeError("text classifier needs at least one class id")
    tokens = np.stack([token_table.token(c) for c in class_ids])
    T, norms = encode_text_rows(enc, prompt_block, lam, tokens)
    return TextClassifier(
        weights=T, class_ids=list(class_ids), y_norms=norms, lam=float(lam), prompt_row=prompt_row
    )


def sample_old_classes(previous_class_ids, s, rng):
    """Uniform sample (without replacement) of at most `s` earlier class ids."""
    previous_class_ids = list(previous_class_ids)
    if s <= 0 or not previous_class_ids:
        return []
    if s >= len(previous_class_ids):
        return list(previous_class_ids)
    picked = rng.choice(len(previous_class_ids), size=s, replace=False)
    return [previous_class_ids[int(i)] for i in picked]


def expand(
    banks,
    new_class_ids,
    init_features,
    task_id,
    *,
    proto_mode="refined",
    prompt_blocks=None,
    prompt_sigma=0.02,
    seed=0,
):
    """Freeze everything already in the banks, then append the new classes.

    New prototypes come from init_prototypes (or seeded random unit rows under
    proto_mode="scratch"); new prompts are small Gaussian blocks unless
    explicit prompt_blocks are given (cross-dataset transfer).
    """
    banks.proto_frozen[:] = True
    banks.prompt_frozen[:] = True
    if not new_class_ids:
        return banks

    for cid in new_class_ids:
        if banks.has_class(cid):
            raise DuplicateClassError(f"class {cid} is already in the banks")
    if len(set(new_class_ids)) != len(new_class_ids):
        raise DuplicateClassError("duplicate ids inside one expansion")

    if proto_mode == "scratch":
        rows = {}
        for cid in new_class_ids:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 301, task_id, cid]))
            v = rng.standard_normal(banks.d)
            rows[cid] = v / np.linalg.norm(v)
    else:
        rows = init_prototypes({cid: init_features[cid] for cid in new_class_ids})

    new_prompts = []
    for cid in new_class_ids:
        if prompt_blocks is not None and cid in prompt_blocks:
            block = np.array(prompt_blocks[cid], dtype=np.float64)
            if block.shape != (banks.M, banks.d):
                raise ShapeError(f"prompt block for class {cid} has shape {block.shape}")
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 302, task_id, cid]))
            block = prompt_sigma * rng.standard_normal((banks.M, banks.d))
        new_prompts.append(block)

    n_new = len(new_class_ids)
    banks.class_ids.extend(int(c) for c in new_class_ids)
    banks.task_of = np.concatenate([banks.task_of, np.full(n_new, task_id, dtype=np.int64)])
    banks.prototypes = np.vstack([banks.prototypes, np.stack([rows[c] for c in new_class_ids])])
    banks.proto_frozen = np.concatenate(
        [banks.proto_frozen, np.full(n_new, proto_mode == "frozen", dtype=bool)]
    )
    banks.prompts = np.concatenate([banks.prompts, np.stack(new_prompts)], axis=0)
    banks.prompt_frozen = np.concatenate([banks.prompt_frozen, np.zeros(n_new, dtype=bool)])
    banks._index = {c: k for k, c in enumerate(banks.class_ids)}
    return banks


def aggregate_scores(vision_scores, text_scores, mode="average"):
    """Combine aligned per-class scores from the two classifiers."""
    v = np.asarray(vision_scores, dtype=np.float64)
    t = np.asarray(text_scores, dtype=np.float64)
    if v.shape != t.shape:
        raise ShapeError(f"score shapes differ: {v.shape} vs {t.shape}")
    if mode == "average":
        return (v + t) / 2.0
    if mode == "max":
        return np.maximum(v, t)
    raise ShapeError(f"unknown aggregation mode {mode!r}")


def save_checkpoint(banks, enc_seed, config_hash, path):
    """Write banks + encoder seed + config hash in the PTPC container."""
    h = config_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IIIIqH", CKPT_VERSION, banks.d, banks.M, banks.n_classes, enc_seed, len(h)))
        fh.write(h)
        for k, cid in enumerate(banks.class_ids):
            fh.write(
                struct.pack(
                    "<IqBB",
                    cid,
                    int(banks.task_of[k]),
                    bool(banks.proto_frozen[k]),
                    bool(banks.prompt_frozen[k]),
                )
            )
        fh.write(np.asarray(banks.prototypes, dtype="<f4").tobytes())
        fh.write(np.asarray(banks.prompts, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a PTPC checkpoint; returns (banks, enc_seed, config_hash).

    Prototype rows are renormalized after the 32-bit round trip.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=off)
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, d, m, n_classes, enc_seed, hash_len = struct.unpack("<IIIIqH", take(26, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    config_hash = take(hash_len, "config hash").decode("utf-8")

    class_ids, task_of, pf, qf = [], [], [], []
    for _ in range(n_classes):
        cid, task, proto_frozen, prompt_frozen = struct.unpack("<IqBB", take(14, "class entry"))
        class_ids.append(cid)
        task_of.append(task)
        pf.append(bool(proto_frozen))
        qf.append(bool(prompt_frozen))

    protos = np.frombuffer(take(4 * n_classes * d, "prototypes"), dtype="<f4")
    protos = protos.reshape(n_classes, d).astype(np.float64)
    prompts = np.frombuffer(take(4 * n_classes * m * d, "prompts"), dtype="<f4")
    prompts = prompts.reshape(n_classes, m, d).astype(np.float64)
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint payload", offset=off)

    if n_classes:
        protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    banks = Banks(d=d, M=m, class_ids=class_ids)
    banks.task_of = np.asarray(task_of, dtype=np.int64)
    banks.prototypes = protos
    banks.proto_frozen = np.asarray(pf, dtype=bool)
    banks.prompts = prompts
    banks.prompt_frozen = np.asarray(qf, dtype=bool)
    banks._index = {c: k for k, c in enumerate(class_ids)}
    return banks, enc_seed, config_hash
