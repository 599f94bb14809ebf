"""Compositional and few-shot train/validation splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SplitError

MODES = ("compositional", "fewshot")


@dataclass
class SplitSpec:
    """Instance-id assignment.

    ``verb_sets`` holds the two verb groups (compositional) or ``(base, novel)``
    (few-shot); ``noun_sets`` is ``(A, B)``. In few-shot mode ``train_ids`` is the
    finetune set, ``val_ids`` the few-shot validation set and ``pretrain_ids``
    every base-verb instance.
    """

    mode: str
    train_ids: list
    val_ids: list
    noun_sets: tuple
    verb_sets: tuple
    k: int | None = None
    seed: int | None = None
    pretrain_ids: list = field(default_factory=list)
    dropped: int = 0
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise SplitError(f"unknown split mode {self.mode!r}")
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise SplitError(f"{len(overlap)} ids appear in both train and val")

    @property
    def base_verbs(self) -> list:
        return list(self.verb_sets[0])

    @property
    def novel_verbs(self) -> list:
        return list(self.verb_sets[1])

    def classes(self, phase: str = "train") -> list:
        """Verb ids that make up the label space of a training phase.

        Compositional: every verb. Few-shot: base verbs for ``"pretrain"``,
        novel verbs for ``"train"``/``"finetune"``.
        """
        if self.mode == "compositional":
            return sorted(set(self.verb_sets[0]) | set(self.verb_sets[1]))
        if phase == "pretrain":
            return sorted(self.verb_sets[0])
        return sorted(self.verb_sets[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noun_sets"] = [list(s) for s in self.noun_sets]
        d["verb_sets"] = [list(s) for s in self.verb_sets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        d = dict(d)
        d["noun_sets"] = tuple(list(s) for s in d["noun_sets"])
        d["verb_sets"] = tuple(list(s) for s in d["verb_sets"])
        return cls(**d)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _two_sets(partition, what):
    if len(partition) != 2:
        raise SplitError(f"{what} partition needs exactly two sets")
    a, b = (sorted(set(int(x) for x in p)) for p in partition)
    if not a or not b:
        raise SplitError(f"{what} partition has an empty side")
    if set(a) & set(b):
        raise SplitError(f"{what} partition sides overlap: {sorted(set(a) & set(b))}")
    return a, b


def make_compositional_split(instances, verb_partition, noun_partition) -> SplitSpec:
    """Train on {verbs1 x A, verbs2 x B}, validate on {verbs1 x B, verbs2 x A}.

    ``instances`` is an iterable of ``(id, verb_id, noun_id)``. Instances whose
    verb or noun falls outside both partitions are dropped and counted.
    """
    v1, v2 = _two_sets(verb_partition, "verb")
    na, nb = _two_sets(noun_partition, "noun")
    v1s, v2s, nas, nbs = set(v1), set(v2), set(na), set(nb)
    train, val, dropped = [], [], 0
    seen = set()
    for iid, verb, noun in instances:
        seen.add((verb, noun))
        if (verb in v1s and noun in nas) or (verb in v2s and noun in nbs):
            train.append(int(iid))
        elif (verb in v1s and noun in nbs) or (verb in v2s and noun in nas):
            val.append(int(iid))
        else:
            dropped += 1
    missing = [(v, n) for v in v1 + v2 for n in na + nb if (v, n) not in seen]
    if missing:
        raise SplitError(f"{len(missing)} verb-noun pairs have no instance, e.g. {missing[:3]}")
    if not train or not val:
        raise SplitError(f"empty split side (train={len(train)}, val={len(val)})")
    return SplitSpec("compositional", sorted(train), sorted(val), (na, nb), (v1, v2), dropped=dropped)


def make_fewshot_split(instances, base_verbs, novel_verbs, k: int, seed: int = 0) -> SplitSpec:
    """Pretrain on base verbs; ``k`` seeded examples per novel verb to finetune.

    Novel-verb nouns are halved (seeded) into a finetune side A and a
    validation side B so the two never share a noun. If some novel verb cannot
    supply ``k`` A-side and one B-side instance, disjointness is abandoned and a
    warning recorded.
    """
    base = sorted(set(int(v) for v in base_verbs))
    novel = sorted(set(int(v) for v in novel_verbs))
    if set(base) & set(novel):
        raise SplitError(f"base and novel verbs overlap: {sorted(set(base) & set(novel))}")
    if not base or not novel:
        raise SplitError("few-shot split needs base and novel verbs")
    if k < 1:
        raise SplitError(f"k must be >= 1, got {k}")
    instances = sorted((int(i), int(v), int(n)) for i, v, n in instances)
    pretrain = [i for i, v, _ in instances if v in base]
    by_verb = {v: [(i, n) for i, vv, n in instances if vv == v] for v in novel}
    for v, items in by_verb.items():
        if len(items) < k + 1:
            raise SplitError(f"novel verb {v} has {len(items)} instances, needs at least k+1 = {k + 1}")

    rng = np.random.default_rng(seed)
    nouns = sorted({n for items in by_verb.values() for _, n in items})
    warnings = []
    shuffled = [int(n) for n in rng.permutation(nouns)]
    side_a = sorted(shuffled[: (len(shuffled) + 1) // 2])
    side_b = sorted(shuffled[(len(shuffled) + 1) // 2 :])
    disjoint = len(nouns) >= 2 and all(
        sum(n in side_a for _, n in items) >= k and any(n in side_b for _, n in items) for items in by_verb.values()
    )
    if not disjoint:
        warnings.append("noun pool too small for disjoint finetune/validation nouns; sampling from all nouns")
        side_a, side_b = nouns, nouns

    train, val, dropped = [], [], 0
    for v in novel:
        pool = [i for i, n in by_verb[v] if n in side_a]
        picked = sorted(int(i) for i in rng.choice(pool, size=k, replace=False))
        train.extend(picked)
        chosen = set(picked)
        for i, n in by_verb[v]:
            if i in chosen:
                continue
            if not disjoint or n in side_b:
                val.append(i)
            else:
                dropped += 1
    return SplitSpec(
        "fewshot",
        sorted(train),
        sorted(val),
        (side_a, side_b),
        (base, novel),
        k=k,
        seed=seed,
        pretrain_ids=pretrain,
        dropped=dropped,
        warnings=warnings,
    )
