"""Domain adapters: task inventories, batches and scoring for the harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..model import Batch, HommModel, basic_task_forward
from ..nets import pad_tokens
from . import cards, poly


@dataclass
class TaskSpec:
    task_id: str
    payload: object  # Polynomial or GameVariant
    held_out: bool
    metadata: dict = field(default_factory=dict)


@dataclass
class MetaTaskSpec:
    """A meta-mapping (pairs of task ids) or a classification (task id, label)."""

    meta_id: str
    kind: str  # mapping | classification
    pairs: list
    held_out: bool = False


class PolyDomain:
    name = "poly"
    higher_is_better = False
    output_dim = 1
    target_dim = 1

    def __init__(self, cfg):
        self.cfg = cfg
        self.n_vars = cfg.tasks.n_vars
        self.input_dim = self.n_vars
        self.max_tokens = poly.MAX_TOKENS

    def vocabulary(self) -> list[str]:
        return poly.vocabulary()

    def build_inventory(self, rng: np.random.Generator):
        t = self.cfg.tasks
        ids: dict = {}
        tasks: dict[str, TaskSpec] = {}

        def register(p, held_out, **meta):
            if p in ids:
                spec = tasks[ids[p]]
                spec.held_out = spec.held_out and held_out
                return spec.task_id
            tid = f"poly{len(ids):04d}"
            ids[p] = tid
            tasks[tid] = TaskSpec(tid, p, held_out, {"poly": p.name(), **meta})
            return tid

        def fresh_sources(n):
            out = []
            while len(out) < n:
                p = poly.sample_polynomial(rng, self.n_vars, t.max_degree)
                if p not in ids:
                    out.append(p)
                    register(p, True, role="source")
            return out

        trained_src = fresh_sources(t.n_trained_sources)
        for p in trained_src:
            tasks[ids[p]].held_out = False
        new_src = fresh_sources(t.n_new_tasks)
        trained_names = set(t.trained_mappings)
        metas = {}
        for name in t.trained_mappings + t.held_out_mappings:
            m = poly.PolyMetaMapping.from_name(name)
            pairs = []
            for p in trained_src + new_src:
                if not poly.mapping_is_applicable(m, p):
                    continue
                src_trained = p in trained_src
                q = poly.apply_meta_mapping(m, p)
                tid = register(q, not (src_trained and name in trained_names), role="image")
                pairs.append((ids[p], tid))
            metas[name] = MetaTaskSpec(name, "mapping", pairs, held_out=name not in trained_names)
        for name in t.classifications:
            labels = [(tid, poly.ground_truth_classification(name, s.payload))
                      for tid, s in tasks.items()]
            metas[name] = MetaTaskSpec(name, "classification", labels)
        return tasks, metas

    def batch(self, task: TaskSpec, n: int, rng: np.random.Generator) -> Batch:
        ds = poly.sample_dataset(task.payload, n, rng)
        y = ds.targets[:, None]
        return Batch(task.task_id, ds.inputs, y, y)

    def evaluate(self, model: HommModel, task: TaskSpec, z, rng: np.random.Generator) -> float:
        probes = self.batch(task, self.cfg.data.dataset_size, rng)
        pred = basic_task_forward(model, z, probes.inputs)
        return float(np.mean((pred.data - probes.outputs) ** 2))

    def meta_tokens(self, meta_id: str) -> list[str]:
        return poly.tokenize_meta_task(meta_id, self.max_tokens)

    def task_tokens(self, task: TaskSpec) -> list[str]:
        raise ValueError("polynomial tasks have no language description")

    def reference_values(self, task: TaskSpec) -> dict:
        return {"optimal_loss": 0.0, "mean_predictor_loss": poly.polynomial_variance(task.payload)}


class CardsDomain:
    name = "cards"
    higher_is_better = True
    input_dim = len(cards.DECK)
    target_dim = 4
    output_dim = 3

    def __init__(self, cfg):
        self.cfg = cfg
        self.rule = cfg.tasks.win_rule
        self.max_tokens = cards.MAX_TOKENS

    def vocabulary(self) -> list[str]:
        return cards.vocabulary()

    def _held_out(self, variants, rng) -> set:
        if self.cfg.tasks.holdout == "targeted":
            return {v for v in variants if v.game == "straight_flush" and v.losers}
        order = rng.permutation(len(variants))
        return {variants[i] for i in order[: len(variants) // 2]}

    def build_inventory(self, rng: np.random.Generator):
        variants = cards.all_variants(self.cfg.tasks.include_suits_rule)
        held = self._held_out(variants, rng)
        tasks = {}
        for v in variants:
            tasks[v.name] = TaskSpec(v.name, v, v in held, {
                "game": v.game, "losers": int(v.losers), "suits_rule": int(v.suits_rule),
                "switch_suit": int(v.switch_suit)})
        metas = {}
        for attr in self.cfg.tasks.card_mappings:
            pairs = []
            for v in variants:
                w = cards.apply_attribute_mapping(attr, v)
                if w.name in tasks:
                    pairs.append((v.name, w.name))
            metas[f"toggle_{attr}"] = MetaTaskSpec(f"toggle_{attr}", "mapping", pairs)
        for kind in self.cfg.tasks.card_classifications:
            if kind == "suits_rule" and not self.cfg.tasks.include_suits_rule:
                continue
            name = f"is_{kind}"
            labels = [(v.name, cards.ground_truth_classification(name, v)) for v in variants]
            metas[name] = MetaTaskSpec(name, "classification", labels)
        return tasks, metas

    def batch(self, task: TaskSpec, n: int, rng: np.random.Generator) -> Batch:
        eps = cards.sample_episodes(task.payload, n, rng, self.rule)
        mask = np.eye(3)[eps.actions]
        return Batch(task.task_id, eps.inputs, eps.targets,
                     np.repeat(eps.rewards[:, None], 3, axis=1), mask)

    def policy(self, model: HommModel, z) -> np.ndarray:
        """Greedy bets on all 28 hands from predicted per-bet rewards."""
        pred = basic_task_forward(model, z, cards.HAND_FEATURES).data
        return np.argmax(pred, axis=1).astype(float)

    def evaluate(self, model: HommModel, task: TaskSpec, z, rng=None) -> float:
        return cards.expected_policy_reward(task.payload, self.policy(model, z), self.rule)

    def meta_tokens(self, meta_id: str) -> list[str]:
        return cards.tokenize_meta_task(meta_id, self.max_tokens)

    def task_tokens(self, task: TaskSpec) -> list[str]:
        return pad_tokens(cards.task_tokens(task.payload), self.max_tokens)

    def reference_values(self, task: TaskSpec) -> dict:
        return {"optimal_reward": cards.optimal_expected_reward(task.payload, self.rule),
                "chance_reward": 0.0}


def make_domain(cfg):
    return PolyDomain(cfg) if cfg.domain == "poly" else CardsDomain(cfg)


def split_pairs(pairs: list, m_batch: int, rng: np.random.Generator) -> tuple[list, list]:
    """Random disjoint (D1, D2) split: D1 takes half, capped at ``m_batch``."""
    if len(pairs) < 2:
        raise ValueError("need at least two pairs to split")
    order = rng.permutation(len(pairs))
    k = min(m_batch, math.ceil(len(pairs) / 2))
    k = min(k, len(pairs) - 1)
    return [pairs[i] for i in order[:k]], [pairs[i] for i in order[k:]]


def as_embedding(z) -> ad.Tensor:
    return ad.as_tensor(np.asarray(z, dtype=float).reshape(1, -1))
