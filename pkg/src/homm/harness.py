"""Training loop, holdout bookkeeping and evaluation protocols."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig
from .domains.adapters import (MetaTaskSpec, TaskSpec, as_embedding, make_domain,
                               split_pairs)
from .model import (AblationFlags, Architecture, Batch, EmbeddingCache, HommModel,
                    basic_task_loss, classification_embedding, embed_task,
                    language_embedding, meta_classification_forward,
                    meta_classification_loss, meta_embedding, meta_mapping_forward,
                    meta_mapping_train_loss, refresh_embedding_cache)
from .nets import LrSchedule, Optimizer, make_optimizer

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "protocol", "task_id", "mapping_id", "task_split", "mapping_split",
                 "metric", "value")


class TrainingDiverged(FloatingPointError):
    pass


class ZeroShotViolation(AssertionError):
    pass


def _split(held_out: bool) -> str:
    return "held_out" if held_out else "trained"


@dataclass
class HoldoutPlan:
    trained_tasks: list
    held_out_tasks: list
    trained_meta: list
    held_out_meta: list
    m_batch_size: int

    def check(self) -> "HoldoutPlan":
        if set(self.trained_tasks) & set(self.held_out_tasks):
            raise ValueError("a task is both trained and held out")
        if set(self.trained_meta) & set(self.held_out_meta):
            raise ValueError("a meta task is both trained and held out")
        if not self.trained_tasks:
            raise ValueError("no trained tasks")
        return self


def build_holdout_plan(cfg: ExperimentConfig, rng: np.random.Generator):
    """Task inventory plus its trained / held-out assignment, deterministic in ``rng``."""
    domain = make_domain(cfg)
    tasks, metas = domain.build_inventory(rng)
    trained = [t for t, s in tasks.items() if not s.held_out]
    held = [t for t, s in tasks.items() if s.held_out]
    tr_set = set(trained)
    trained_meta, held_meta = [], []
    for mid, spec in metas.items():
        usable = [p for p in spec.pairs if p[0] in tr_set and (spec.kind == "classification"
                                                              or p[1] in tr_set)]
        if spec.held_out or len(usable) < 2:
            held_meta.append(mid)
        else:
            trained_meta.append(mid)
    plan = HoldoutPlan(trained, held, trained_meta, held_meta, cfg.data.m_batch_size).check()
    return domain, tasks, metas, plan


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, protocol, metric, value, task_id="", mapping_id="",
            task_split="", mapping_split="") -> None:
        self.rows.append({"epoch": epoch, "protocol": protocol, "task_id": task_id,
                          "mapping_id": mapping_id, "task_split": task_split,
                          "mapping_split": mapping_split, "metric": metric,
                          "value": float(value)})

    def select(self, **match) -> list:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def values(self, **match) -> np.ndarray:
        return np.array([r["value"] for r in self.select(**match)])

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "value": repr(r["value"])})


def _seed_for(*parts) -> list[int]:
    return [zlib.crc32(str(p).encode()) for p in parts]


def build_model(cfg: ExperimentConfig, domain, init_stream: str = "init") -> HommModel:
    a = cfg.architecture
    language = cfg.language or cfg.language_alone
    vocab = tuple(domain.vocabulary()) if language else ()
    arch = Architecture(domain.input_dim, domain.target_dim, domain.output_dim, a.z_dim,
                        a.i_layers, a.i_hidden, a.t_layers, a.o_layers, a.o_hidden, a.mh_hidden,
                        a.h_layers, a.f_layers, a.f_hidden, a.l_layers if language else 0,
                        a.l_hidden, vocab)
    rng = np.random.default_rng(_seed_for(cfg.seed, init_stream))
    return HommModel(arch, rng, AblationFlags.from_name(cfg.ablation))


class Experiment:
    """One run: inventory, holdout plan, model, optimizers and metrics."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(_seed_for(cfg.seed, "inventory"))
        self.domain, self.tasks, self.metas, self.plan = build_holdout_plan(cfg, rng)
        self.model = build_model(cfg, self.domain)
        self.rng = np.random.default_rng(_seed_for(cfg.seed, "train"))
        o = cfg.optimizer
        self.schedule = LrSchedule(o.base_lr, o.meta_lr, o.base_decay, o.meta_decay,
                                   o.base_lr_min, o.meta_lr_min, o.decay_period)
        self.optimizers: dict[str, Optimizer] = {}
        self.cache = EmbeddingCache()
        self.datasets: dict[str, Batch] = {}
        self.metrics = MetricsLog()
        self.epoch = 0
        self._untrained = None

    # -- parameter groups --------------------------------------------------

    def _group(self, kind: str) -> list[Tensor]:
        m = self.model
        task_net = [m.F_cond] if m.F_cond is not None else [m.H]
        meta_net = [m.F_cond] if m.F_cond is not None else [m.H_meta]
        if kind == "base":
            mods = [m.I, m.T, m.O, m.M] + task_net
        elif kind == "meta":
            mods = [m.M_meta] + meta_net
        elif kind == "classification":
            mods = [m.M_meta, m.label_encoder, m.readout] + meta_net
        elif kind == "language_meta":
            mods = [m.L, m.readout] + meta_net
        elif kind == "language_task":
            mods = [m.L, m.O, m.I] + task_net
        else:
            raise ValueError(kind)
        seen, out = set(), []
        for mod in mods:
            for p in mod.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def _step(self, kind: str, loss: Tensor, tape: ad.Tape, lr: float) -> float:
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite {kind} loss at epoch {self.epoch}")
        if kind not in self.optimizers:
            self.optimizers[kind] = make_optimizer(self.cfg.optimizer.kind, self._group(kind))
        opt = self.optimizers[kind]
        opt.step(tape.backward(loss, opt.params), lr)
        return value

    # -- data ----------------------------------------------------------------

    def regenerate_datasets(self) -> None:
        n = self.cfg.data.dataset_size
        self.datasets = {t: self.domain.batch(self.tasks[t], n, self.rng)
                         for t in self.plan.trained_tasks}

    def _split_batch(self, batch: Batch, rng) -> tuple[Batch, Batch]:
        k = self.cfg.data.m_batch_size
        perm = rng.permutation(len(batch))
        return _take(batch, perm[:k]), _take(batch, perm[k:])

    def refresh_cache(self) -> EmbeddingCache:
        examples = {t: self._split_batch(self.datasets[t], self.rng)[0]
                    for t in self.plan.trained_tasks}
        return refresh_embedding_cache(self.model, examples, self.epoch, self.cache)

    # -- training --------------------------------------------------------------

    def _meta_pairs(self, mid: str) -> list:
        tr = set(self.plan.trained_tasks)
        spec = self.metas[mid]
        if spec.kind == "classification":
            return [p for p in spec.pairs if p[0] in tr]
        return [p for p in spec.pairs if p[0] in tr and p[1] in tr]

    def _meta_loss(self, mid: str, d1, d2, z_meta=None) -> Tensor:
        if self.cache.epoch != self.epoch:
            raise RuntimeError("embedding cache is stale")
        spec = self.metas[mid]
        if spec.kind == "classification":
            z1 = self.cache.stack([t for t, _ in d1]) if d1 else None
            z2 = self.cache.stack([t for t, _ in d2])
            return meta_classification_loss(
                self.model, (z1, [y for _, y in d1]) if d1 else None, (z2, [y for _, y in d2]),
                z_meta)
        src1 = self.cache.stack([s for s, _ in d1]) if d1 else None
        tgt1 = self.cache.stack([t for _, t in d1]) if d1 else None
        d2z = (self.cache.stack([s for s, _ in d2]), self.cache.stack([t for _, t in d2]))
        return meta_mapping_train_loss(self.model, (src1, tgt1), d2z, z_meta)

    def train_epoch(self) -> dict:
        cfg, epoch = self.cfg, self.epoch
        if epoch % cfg.data.refresh_period == 0 or not self.datasets:
            self.regenerate_datasets()
        self.refresh_cache()
        base_lr, meta_lr = self.schedule.rates(epoch)
        steps = [("base", t) for t in self.plan.trained_tasks]
        steps += [("meta", m) for m in self.plan.trained_meta]
        if cfg.language:
            steps += [("language_meta", m) for m in self.plan.trained_meta]
        if cfg.language_alone:
            steps += [("language_task", t) for t in self.plan.trained_tasks]
        order = self.rng.permutation(len(steps))
        losses: dict[str, list] = {}
        for i in order:
            kind, key = steps[i]
            with ad.Tape() as tape:
                if kind in ("base", "language_task"):
                    d1, d2 = self._split_batch(self.datasets[key], self.rng)
                    z = None
                    if kind == "language_task":
                        z = language_embedding(self.model, self.domain.task_tokens(self.tasks[key]))
                    loss = basic_task_loss(self.model, d1, d2, z)
                    lr = base_lr
                else:
                    pairs = self._meta_pairs(key)
                    d1, d2 = split_pairs(pairs, self.cfg.data.m_batch_size, self.rng)
                    z_meta = None
                    if kind == "language_meta":
                        z_meta = language_embedding(self.model, self.domain.meta_tokens(key))
                        d1, d2 = [], pairs
                    loss = self._meta_loss(key, d1, d2, z_meta)
                    lr = meta_lr
                    if kind == "meta" and self.metas[key].kind == "classification":
                        kind = "classification"
            losses.setdefault(kind, []).append(self._step(kind, loss, tape, lr))
        summary = {k: float(np.mean(v)) for k, v in losses.items()}
        for k, v in summary.items():
            self.metrics.add(epoch, "train", f"{k}_loss", v)
        self.metrics.add(epoch, "train", "base_lr", base_lr)
        self.metrics.add(epoch, "train", "meta_lr", meta_lr)
        self.epoch += 1
        return summary

    def train(self, epochs: int | None = None, log_every: int = 0) -> None:
        epochs = self.cfg.data.epochs if epochs is None else epochs
        for _ in range(epochs):
            summary = self.train_epoch()
            if log_every and self.epoch % log_every == 0:
                log.info("epoch %d %s", self.epoch, summary)
        if self.datasets:
            self.refresh_cache()

    # -- embeddings for evaluation -------------------------------------------

    def eval_rng(self, *parts) -> np.random.Generator:
        return np.random.default_rng(_seed_for(self.cfg.seed, "eval", *parts))

    def example_embedding(self, task_id: str, n_examples: int | None = None,
                          model: HommModel | None = None, rng=None) -> Tensor:
        model = model or self.model
        n = n_examples or self.cfg.data.m_batch_size
        rng = rng or self.eval_rng("examples", task_id)
        return embed_task(model, self.domain.batch(self.tasks[task_id], n, rng))

    @property
    def untrained_model(self) -> HommModel:
        if self._untrained is None:
            self._untrained = build_model(self.cfg, self.domain, "untrained")
        return self._untrained

    def score(self, task_id: str, z, model: HommModel | None = None) -> float:
        return self.domain.evaluate(model or self.model, self.tasks[task_id], as_embedding(
            ad.as_tensor(z).data), self.eval_rng("probes", task_id))

    def ensure_cache(self) -> None:
        if not self.datasets:
            self.regenerate_datasets()
        if not len(self.cache):
            self.refresh_cache()


def _take(batch: Batch, idx) -> Batch:
    return Batch(batch.task_id, batch.inputs[idx], batch.targets[idx], batch.outputs[idx],
                 None if batch.mask is None else batch.mask[idx])


# -- evaluation protocols ------------------------------------------------------


def evaluate_basic(exp: Experiment, task_ids: Sequence[str] | None = None,
                   include_untrained: bool = True) -> MetricsLog:
    """Per task: embed from a fresh example batch, score on fresh probes."""
    out = MetricsLog()
    ids = list(task_ids) if task_ids is not None else exp.plan.trained_tasks + exp.plan.held_out_tasks
    metric = "expected_reward" if exp.domain.higher_is_better else "probe_loss"
    for tid in ids:
        split = _split(exp.tasks[tid].held_out)
        out.add(exp.epoch, "basic", metric, exp.score(tid, exp.example_embedding(tid)), tid,
                task_split=split)
        if include_untrained:
            um = exp.untrained_model
            out.add(exp.epoch, "basic", f"untrained_{metric}",
                    exp.score(tid, exp.example_embedding(tid, model=um), um), tid,
                    task_split=split)
        for k, v in exp.domain.reference_values(exp.tasks[tid]).items():
            out.add(exp.epoch, "basic", k, v, tid, task_split=split)
        if exp.domain.name == "cards" and exp.tasks[tid].held_out:
            from .domains import cards
            trained = [exp.tasks[t].payload for t in exp.plan.trained_tasks]
            _, r = cards.most_correlated_baseline(exp.tasks[tid].payload, trained, exp.domain.rule)
            out.add(exp.epoch, "basic", "most_correlated_reward", r, tid, task_split=split)
    exp.metrics.rows += out.rows
    return out


class _Tracker:
    """Hands out task embeddings and remembers which tasks they came from."""

    def __init__(self, exp: Experiment, model: HommModel | None = None):
        self.exp = exp
        self.model = model
        self.touched: set = set()
        self.fresh: dict = {}

    def get(self, task_id: str) -> np.ndarray:
        self.touched.add(task_id)
        if self.model is None and task_id in self.exp.cache:
            return self.exp.cache[task_id]
        if task_id not in self.fresh:
            self.fresh[task_id] = self.exp.example_embedding(task_id, model=self.model).data
        return self.fresh[task_id]

    def stack(self, ids) -> np.ndarray:
        return np.concatenate([self.get(t) for t in ids], axis=0)


def _meta_function(exp: Experiment, tracker: _Tracker, spec: MetaTaskSpec, exclude: str,
                   cue: str) -> Tensor:
    """z_meta for a mapping from examples (pairs avoiding ``exclude``) or from language."""
    model = tracker.model or exp.model
    if cue == "language":
        return language_embedding(model, exp.domain.meta_tokens(spec.meta_id))
    trained = set(exp.plan.trained_tasks)
    pairs = [(s, t) for s, t in spec.pairs if s in trained and exclude not in (s, t)]
    if not pairs:
        raise ValueError(f"no example pairs available for {spec.meta_id}")
    pairs = pairs[: exp.cfg.data.m_batch_size]
    return meta_embedding(model, tracker.stack([s for s, _ in pairs]),
                          tracker.stack([t for _, t in pairs]))


def evaluate_meta_mapping_zero_shot(exp: Experiment, cue: str = "examples",
                                    mapping_ids: Sequence[str] | None = None) -> MetricsLog:
    """Map source-task embeddings and score the mapped embeddings on the target tasks.

    The target task's own examples are never consumed: the instrumentation
    raises ``ZeroShotViolation`` if they are.
    """
    if cue not in ("examples", "language"):
        raise ValueError("cue must be examples or language")
    exp.ensure_cache()
    out = MetricsLog()
    higher = exp.domain.higher_is_better
    metric = "expected_reward" if higher else "probe_loss"
    mids = mapping_ids or [m for m in exp.plan.trained_meta + exp.plan.held_out_meta
                           if exp.metas[m].kind == "mapping"]
    protocol = f"meta_{cue}"
    for mid in mids:
        spec = exp.metas[mid]
        mapping_split = _split(mid not in exp.plan.trained_meta)
        for src, tgt in spec.pairs:
            if src == tgt:
                continue  # the mapping fixes this task; nothing to infer zero-shot
            split = _split(exp.tasks[tgt].held_out)
            z_src = None
            for prefix, model in (("", exp.model), ("untrained_", exp.untrained_model)):
                tracker = _Tracker(exp, None if model is exp.model else model)
                log_start = len(model.example_log.consumed)
                z_meta = _meta_function(exp, tracker, spec, tgt, cue)
                z = tracker.get(src)
                z_hat = meta_mapping_forward(model, z_meta, z).data
                consumed = set(model.example_log.consumed[log_start:]) | tracker.touched
                if tgt in consumed:
                    raise ZeroShotViolation(f"examples of {tgt} used to evaluate it zero-shot")
                out.add(exp.epoch, protocol, prefix + metric, exp.score(tgt, z_hat, model), tgt,
                        mid, split, mapping_split)
                z_src = z if z_src is None else z_src
            out.add(exp.epoch, protocol, f"ignore_{metric}", exp.score(tgt, z_src), tgt, mid,
                    split, mapping_split)
            if exp.domain.name == "cards":
                from .domains import cards
                out.add(exp.epoch, protocol, "oracle_ignore_reward",
                        cards.ignore_mapping_reward(exp.tasks[src].payload,
                                                    exp.tasks[tgt].payload, exp.domain.rule),
                        tgt, mid, split, mapping_split)
                out.add(exp.epoch, protocol, "optimal_reward",
                        cards.optimal_expected_reward(exp.tasks[tgt].payload, exp.domain.rule),
                        tgt, mid, split, mapping_split)
    if cue == "language" and exp.cfg.language_alone:
        for tid in exp.plan.trained_tasks + exp.plan.held_out_tasks:
            z = language_embedding(exp.model, exp.domain.task_tokens(exp.tasks[tid]))
            out.add(exp.epoch, "language_alone", metric, exp.score(tid, z), tid,
                    task_split=_split(exp.tasks[tid].held_out))
    exp.metrics.rows += out.rows
    return out


def evaluate_meta_classification(exp: Experiment) -> MetricsLog:
    exp.ensure_cache()
    out = MetricsLog()
    trained = set(exp.plan.trained_tasks)
    for mid in exp.plan.trained_meta:
        spec = exp.metas[mid]
        if spec.kind != "classification":
            continue
        tracker = _Tracker(exp)
        d1 = [(t, y) for t, y in spec.pairs if t in trained][: exp.cfg.data.m_batch_size]
        z_meta = classification_embedding(exp.model, tracker.stack([t for t, _ in d1]),
                                          [y for _, y in d1])
        for held in (False, True):
            probe = [(t, y) for t, y in spec.pairs if exp.tasks[t].held_out == held]
            if not probe:
                continue
            probs = meta_classification_forward(exp.model, z_meta,
                                                tracker.stack([t for t, _ in probe])).data[:, 0]
            acc = float(np.mean((probs > 0.5) == np.array([y for _, y in probe], dtype=bool)))
            out.add(exp.epoch, "meta_classification", "accuracy", acc, mapping_id=mid,
                    task_split=_split(held))
    exp.metrics.rows += out.rows
    return out


def sample_efficiency_sweep(exp: Experiment, task_ids: Sequence[str] | None = None,
                            counts: Sequence[int] = (1, 2, 5, 10, 20, 50),
                            include_untrained: bool = True) -> MetricsLog:
    """Probe score as a function of the number of examples given to M."""
    out = MetricsLog()
    ids = list(task_ids) if task_ids is not None else exp.plan.trained_tasks + exp.plan.held_out_tasks
    models = [("sweep", exp.model)]
    if include_untrained:
        models.append(("sweep_untrained", exp.untrained_model))
    metric = "expected_reward" if exp.domain.higher_is_better else "probe_loss"
    for protocol, model in models:
        for n in counts:
            for tid in ids:
                z = exp.example_embedding(tid, n, model=model)
                out.add(exp.epoch, protocol, metric, exp.score(tid, z, model), tid,
                        mapping_id=f"n={n}", task_split=_split(exp.tasks[tid].held_out))
    exp.metrics.rows += out.rows
    return out


def sweep_means(sweep: MetricsLog, protocol: str = "sweep") -> dict[int, float]:
    groups: dict[int, list] = {}
    for r in sweep.rows:
        if r["protocol"] == protocol:
            groups.setdefault(int(r["mapping_id"][2:]), []).append(r["value"])
    return {n: float(np.mean(v)) for n, v in sorted(groups.items())}


# -- continual learning -----------------------------------------------------------


@dataclass
class ContinualResult:
    mode: str
    curve: np.ndarray  # mean new-task loss per step (index 0 = before any step)
    target: float
    steps_to_target: int | None
    old_before: np.ndarray
    old_after: np.ndarray

    @property
    def reached(self) -> bool:
        return self.steps_to_target is not None

    @property
    def old_unchanged(self) -> bool:
        return np.array_equal(self.old_before, self.old_after)


def _old_task_losses(exp: Experiment, model: HommModel, old_ids) -> np.ndarray:
    return np.array([exp.score(t, exp.example_embedding(t, model=model), model) for t in old_ids])


def new_task_specs(exp: Experiment, n: int) -> list[TaskSpec]:
    """Fresh tasks outside the inventory, drawn from a dedicated stream."""
    rng = exp.eval_rng("continual-tasks")
    out = []
    if exp.domain.name == "poly":
        from .domains import poly
        known = {s.payload for s in exp.tasks.values()}
        while len(out) < n:
            p = poly.sample_polynomial(rng, exp.cfg.tasks.n_vars, exp.cfg.tasks.max_degree)
            if p not in known and p.coeffs:
                known.add(p)
                out.append(TaskSpec(f"new{len(out):03d}", p, True, {"poly": p.name()}))
    else:
        out = [exp.tasks[t] for t in exp.plan.held_out_tasks[:n]]
    return out


def continual_embedding_learning(exp: Experiment, new_tasks: Sequence[TaskSpec], mode: str,
                                 steps: int | None = None, target: float | None = None
                                 ) -> ContinualResult:
    """Optimize only per-task embeddings with all network parameters frozen.

    ``warm`` starts from M's guess, ``random`` from noise matched to the scale
    of cached embeddings, ``untrained-net`` uses a freshly initialized network.
    """
    if exp.domain.higher_is_better:
        raise ValueError("continual learning is defined for the regression domain")
    cc = exp.cfg.continual
    steps = cc.steps if steps is None else steps
    exp.ensure_cache()
    model = exp.untrained_model if mode == "untrained-net" else exp.model
    if mode not in ("warm", "random", "untrained-net"):
        raise ValueError(f"unknown mode {mode!r}")
    for spec in new_tasks:
        exp.tasks.setdefault(spec.task_id, spec)
    old_ids = exp.plan.trained_tasks[: cc.n_old]
    old_before = _old_task_losses(exp, model, old_ids)
    frozen = [p.data.copy() for p in model.parameters()]

    rng = exp.eval_rng("continual", mode)
    scale = float(np.std(exp.cache.stack(exp.plan.trained_tasks)))
    batches, zs = [], []
    for spec in new_tasks:
        batch = exp.domain.batch(spec, exp.cfg.data.dataset_size, exp.eval_rng("continual", spec.task_id))
        ex = _take(batch, np.arange(cc.m_batch_size))
        probes = _take(batch, np.arange(cc.m_batch_size, len(batch)))
        batches.append(probes)
        if mode == "random":
            z0 = rng.normal(0.0, scale, size=(1, model.z_dim))
        else:
            z0 = embed_task(model, ex).data.copy()
        zs.append(Tensor(z0, requires_grad=True, name=f"z.{spec.task_id}"))
    opt = make_optimizer(exp.cfg.optimizer.kind, zs)

    def mean_loss() -> float:
        return float(np.mean([basic_task_loss(model, None, b, z).item()
                              for b, z in zip(batches, zs)]))

    if target is None:
        target = cc.target_fraction * float(np.mean(
            [exp.domain.reference_values(s)["mean_predictor_loss"] for s in new_tasks]))
    curve = [mean_loss()]
    for _ in range(steps):
        grads = []
        for b, z in zip(batches, zs):
            with ad.Tape() as tape:
                loss = basic_task_loss(model, None, b, z)
            grads.append(tape.backward(loss, [z])[0])
        opt.step(grads, exp.cfg.optimizer.cached_embedding_lr)
        curve.append(mean_loss())
    for p, before in zip(model.parameters(), frozen):
        if not np.array_equal(p.data, before):
            raise RuntimeError("network parameters changed during embedding optimization")
    old_after = _old_task_losses(exp, model, old_ids)
    curve = np.array(curve)
    hit = np.nonzero(curve <= target)[0]
    result = ContinualResult(mode, curve, target, int(hit[0]) if len(hit) else None,
                             old_before, old_after)
    for i in range(0, len(curve), max(1, len(curve) // 50)):
        exp.metrics.add(i, f"continual_{mode}", "new_task_loss", curve[i])
    exp.metrics.add(steps, f"continual_{mode}", "steps_to_target",
                    -1 if result.steps_to_target is None else result.steps_to_target)
    exp.metrics.add(steps, f"continual_{mode}", "old_task_max_abs_change",
                    float(np.max(np.abs(old_after - old_before))) if len(old_ids) else 0.0)
    return result


def finetune_all_with_replay(exp: Experiment, new_tasks: Sequence[TaskSpec],
                             replay_ratio: float | None = None, epochs: int = 20) -> MetricsLog:
    """Train every parameter on new tasks, interleaving replayed old-task steps."""
    cc = exp.cfg.continual
    ratio = cc.replay_ratio if replay_ratio is None else replay_ratio
    out = MetricsLog()
    for spec in new_tasks:
        exp.tasks.setdefault(spec.task_id, spec)
    old_ids = exp.plan.trained_tasks[: cc.n_old]
    new_ids = [s.task_id for s in new_tasks]
    rng = exp.eval_rng("integrate", ratio)
    data = {t: exp.domain.batch(exp.tasks[t], exp.cfg.data.dataset_size, rng)
            for t in new_ids + old_ids}
    opt = make_optimizer(exp.cfg.optimizer.kind, exp._group("base"))
    lr = exp.schedule.rates(exp.epoch)[0]

    def record(epoch):
        for name, ids in (("old", old_ids), ("new", new_ids)):
            vals = [exp.score(t, exp.example_embedding(t)) for t in ids]
            out.add(epoch, f"integrate_r{ratio:g}", f"{name}_task_loss", float(np.mean(vals)))

    record(0)
    n_replay = int(round(ratio * len(new_ids)))
    for epoch in range(1, epochs + 1):
        steps = list(new_ids)
        if n_replay and old_ids:
            steps += [old_ids[i] for i in rng.integers(0, len(old_ids), size=n_replay)]
        for i in rng.permutation(len(steps)):
            d1, d2 = exp._split_batch(data[steps[i]], rng)
            with ad.Tape() as tape:
                loss = basic_task_loss(exp.model, d1, d2)
            opt.step(tape.backward(loss, opt.params), lr)
        record(epoch)
    exp.metrics.rows += out.rows
    return out


# -- export --------------------------------------------------------------------------


def export_embeddings(exp: Experiment, path) -> int:
    """One CSV row per task and per meta task: id, kind, split, metadata, z0..z(Z-1)."""
    exp.ensure_cache()
    tracker = _Tracker(exp)
    rows = []
    for tid, spec in exp.tasks.items():
        z = tracker.get(tid)
        rows.append((tid, "task", _split(spec.held_out), spec.metadata, z))
    trained = set(exp.plan.trained_tasks)
    for mid, spec in exp.metas.items():
        if spec.kind == "classification":
            d1 = [(t, y) for t, y in spec.pairs if t in trained][: exp.cfg.data.m_batch_size]
            z = classification_embedding(exp.model, tracker.stack([t for t, _ in d1]),
                                         [y for _, y in d1]).data
        else:
            z = _meta_function(exp, tracker, spec, "", "examples").data
        rows.append((mid, spec.kind, _split(mid not in exp.plan.trained_meta), {}, z))
    zdim = exp.model.z_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "kind", "split", "metadata"] + [f"z{i}" for i in range(zdim)])
        for tid, kind, split, meta, z in rows:
            w.writerow([tid, kind, split, json.dumps(meta, sort_keys=True)]
                       + [repr(float(v)) for v in np.ravel(z)])
    return len(rows)


def write_outputs(exp: Experiment, out_dir) -> None:
    from .checkpoint import save_checkpoint
    from .config import write_resolved

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(exp.cfg, out)
    exp.metrics.write(out / "metrics.csv")
    save_checkpoint(exp.model, out / "checkpoint.bin", epoch=exp.epoch)
