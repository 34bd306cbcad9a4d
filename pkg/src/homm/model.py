"""HoMM computational paths.

Basic tasks: examples are embedded by the input/target encoders, collapsed by
the meta network into a task embedding, the hypernetwork turns that into
task-network parameters, and probes flow input encoder -> task network ->
output decoder.  Meta-mappings reuse the same meta network, hypernetwork and
task network one level up, on task embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import (DeepSetEncoder, HyperNetwork, LstmEncoder, MlpStack, Module,
                   TaskNetwork)


EMBED_GAIN = 0.1
TARGET_GAIN = 0.2


@dataclass(frozen=True)
class AblationFlags:
    separate_task_space: bool = False
    conditioned_f: bool = False

    def __post_init__(self):
        if self.separate_task_space and self.conditioned_f:
            raise ValueError("ablations are studied one at a time")

    @classmethod
    def from_name(cls, name: str | None) -> "AblationFlags":
        if name in (None, "", "none"):
            return cls()
        if name == "separate-z":
            return cls(separate_task_space=True)
        if name == "conditioned-f":
            return cls(conditioned_f=True)
        raise ValueError(f"unknown ablation {name!r}")

    @property
    def name(self) -> str:
        if self.separate_task_space:
            return "separate-z"
        if self.conditioned_f:
            return "conditioned-f"
        return "none"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    target_dim: int
    output_dim: int
    z_dim: int = 512
    i_layers: int = 3
    i_hidden: int = 64
    t_layers: int = 1
    o_layers: int = 1
    o_hidden: int = 512
    mh_hidden: int = 512
    h_layers: int = 4
    f_layers: int = 4
    f_hidden: int = 64
    l_layers: int = 0  # 0 disables the language encoder
    l_hidden: int = 512
    vocab: tuple = ()


@dataclass
class Batch:
    """Examples or probes of one task.

    ``targets`` feed the target encoder, ``outputs`` are what the output
    decoder should predict; ``mask`` marks observed output entries.
    """

    task_id: str
    inputs: np.ndarray
    targets: np.ndarray
    outputs: np.ndarray
    mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.inputs)


class ExampleLog:
    """Records every task whose labelled examples reached the meta network."""

    def __init__(self):
        self.consumed: list[str] = []

    def record(self, task_id: str) -> None:
        self.consumed.append(task_id)

    def clear(self) -> None:
        self.consumed.clear()

    def __contains__(self, task_id: str) -> bool:
        return task_id in self.consumed


class HommModel(Module):
    def __init__(self, arch: Architecture, rng: np.random.Generator,
                 ablation: AblationFlags = AblationFlags()):
        self.arch = arch
        self.ablation = ablation
        z = arch.z_dim
        self.z_dim = z
        self.I = MlpStack([arch.input_dim] + [arch.i_hidden] * (arch.i_layers - 1) + [z], rng,
                          final_activation=True, name="I")
        self.T = MlpStack([arch.target_dim] + [arch.i_hidden] * (arch.t_layers - 1) + [z], rng,
                          name="T")
        self.O = MlpStack([z] + [arch.o_hidden] * (arch.o_layers - 1) + [arch.output_dim], rng,
                          name="O")
        self.label_encoder = MlpStack([1, z], rng, name="label_T")
        self.readout = MlpStack([z, 1], rng, name="readout")
        self.M = DeepSetEncoder(z, arch.mh_hidden, rng, name="M")
        self.F = TaskNetwork(z, arch.f_hidden, arch.f_layers)
        if ablation.conditioned_f:
            self.H = None
            self.F_cond = MlpStack([2 * z] + [arch.f_hidden] * (arch.f_layers - 1) + [z], rng,
                                   name="F_cond")
        else:
            self.H = HyperNetwork(z, arch.mh_hidden, self.F, rng, arch.h_layers, name="H")
            self.F_cond = None
        if ablation.separate_task_space:
            self.M_meta = DeepSetEncoder(z, arch.mh_hidden, rng, name="M_meta")
            self.H_meta = HyperNetwork(z, arch.mh_hidden, self.F, rng, arch.h_layers,
                                       name="H_meta")
        else:
            self.M_meta, self.H_meta = self.M, self.H
        self.L = None
        if arch.l_layers:
            self.L = LstmEncoder(arch.vocab, arch.l_hidden, z, arch.l_layers, rng)
        # The task network's output grows like |z|^depth through the generated
        # weights, so embeddings must start near unit scale; max pooling
        # otherwise inflates them roughly tenfold.
        for enc in {id(self.M): self.M, id(self.M_meta): self.M_meta}.values():
            enc.pooled.weights[-1].data *= EMBED_GAIN
        # raw targets enter through a single linear layer; keep them at the
        # scale of the input encoder's output
        self.T.weights[0].data *= TARGET_GAIN
        self.example_log = ExampleLog()

    def modules(self) -> list[tuple[str, Module]]:
        mods = [("I", self.I), ("T", self.T), ("O", self.O), ("label_T", self.label_encoder),
                ("readout", self.readout), ("M", self.M)]
        if self.H is not None:
            mods.append(("H", self.H))
        if self.F_cond is not None:
            mods.append(("F_cond", self.F_cond))
        if self.ablation.separate_task_space:
            mods += [("M_meta", self.M_meta), ("H_meta", self.H_meta)]
        if self.L is not None:
            mods.append(("L", self.L))
        return mods

    def named_parameters(self, prefix=""):
        out = []
        for _, m in self.modules():
            out += m.named_parameters(prefix)
        return out

    # -- shared transformation machinery ---------------------------------

    def _run(self, meta_level: bool, z_fn, x) -> Tensor:
        """Apply the task network selected by ``z_fn`` to embedded inputs."""
        x = ad.as_tensor(x)
        if self.ablation.conditioned_f:
            cue = ad.mul(Tensor(np.ones((x.shape[0], 1))), z_fn)
            return self.F_cond(ad.concat([x, cue], axis=1))
        h = self.H_meta if meta_level else self.H
        return self.F(h(z_fn), x)


def _check_nonempty(batch_or_pairs, what: str) -> None:
    if len(batch_or_pairs) == 0:
        raise ValueError(f"{what} must be nonempty")


def encode_pairs(model: HommModel, examples: Batch) -> tuple[Tensor, Tensor]:
    """Embed raw examples: inputs by the input encoder, targets by the target encoder."""
    _check_nonempty(examples, "example set")
    x = np.asarray(examples.inputs, dtype=float)
    y = np.asarray(examples.targets, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ad.DimensionError(f"inputs must be (n, {model.arch.input_dim}), got {x.shape}")
    if y.ndim != 2 or y.shape[1] != model.arch.target_dim:
        raise ad.DimensionError(f"targets must be (n, {model.arch.target_dim}), got {y.shape}")
    model.example_log.record(examples.task_id)
    return model.I(x), model.T(y)


def infer_task_embedding(model: HommModel, pairs: tuple[Tensor, Tensor]) -> Tensor:
    _check_nonempty(pairs[0], "pair set")
    return model.M(pairs)


def embed_task(model: HommModel, examples: Batch) -> Tensor:
    return infer_task_embedding(model, encode_pairs(model, examples))


def basic_task_forward(model: HommModel, z_task, probe_inputs) -> Tensor:
    z_task = ad.as_tensor(z_task)
    if z_task.shape != (1, model.z_dim):
        raise ad.DimensionError(f"task embedding must be (1, {model.z_dim}), got {z_task.shape}")
    return model.O(model._run(False, z_task, model.I(np.asarray(probe_inputs, dtype=float))))


def prediction_loss(pred: Tensor, probes: Batch) -> Tensor:
    """Mean squared error over probes, restricted to observed entries."""
    if probes.mask is None:
        return ad.loss_l2(pred, probes.outputs)
    diff = ad.sub(pred, probes.outputs)
    sq = ad.mul(ad.mul(diff, diff), probes.mask)
    return ad.scale(ad.reduce_sum(sq), 1.0 / len(probes))


def basic_task_loss(model: HommModel, examples: Batch, probes: Batch,
                    z_task: Tensor | None = None) -> Tensor:
    _check_nonempty(probes, "probe set")
    if z_task is None:
        z_task = embed_task(model, examples)
    return prediction_loss(basic_task_forward(model, z_task, probes.inputs), probes)


def meta_embedding(model: HommModel, sources, targets) -> Tensor:
    """Function embedding of a meta-mapping from (source, target) embedding pairs."""
    sources, targets = ad.as_tensor(sources), ad.as_tensor(targets)
    _check_nonempty(sources, "meta example set")
    return model.M_meta((sources, targets))


def meta_mapping_forward(model: HommModel, z_meta, z_sources) -> Tensor:
    return model._run(True, ad.as_tensor(z_meta), z_sources)


def meta_mapping_train_loss(model: HommModel, d1: tuple, d2: tuple,
                            z_meta: Tensor | None = None) -> Tensor:
    """Latent l2 loss of mapping probe sources onto probe targets.

    Embeddings in ``d1``/``d2`` are treated as constants: only the
    meta-network/hypernetwork path receives gradients.
    """
    src2, tgt2 = (np.asarray(ad.as_tensor(a).data) for a in d2)
    _check_nonempty(src2, "meta probe set")
    if z_meta is None:
        src1, tgt1 = (Tensor(np.asarray(ad.as_tensor(a).data)) for a in d1)
        z_meta = meta_embedding(model, src1, tgt1)
    return ad.loss_l2(meta_mapping_forward(model, z_meta, Tensor(src2)), tgt2)


def label_embeddings(model: HommModel, labels) -> Tensor:
    return model.label_encoder(np.asarray(labels, dtype=float).reshape(-1, 1))


def classification_embedding(model: HommModel, z_tasks, labels) -> Tensor:
    z_tasks = Tensor(np.asarray(ad.as_tensor(z_tasks).data))
    return model.M_meta((z_tasks, label_embeddings(model, labels)))


def meta_classification_forward(model: HommModel, z_meta, z_tasks) -> Tensor:
    mapped = meta_mapping_forward(model, z_meta, Tensor(np.asarray(ad.as_tensor(z_tasks).data)))
    return ad.sigmoid(model.readout(mapped))


def meta_classification_loss(model: HommModel, d1: tuple, d2: tuple,
                             z_meta: Tensor | None = None) -> Tensor:
    z2, y2 = d2
    if z_meta is None:
        z_meta = classification_embedding(model, *d1)
    probs = meta_classification_forward(model, z_meta, z2)
    return ad.loss_bce(probs, np.asarray(y2, dtype=float).reshape(-1, 1))


def language_embedding(model: HommModel, tokens: Sequence[str]) -> Tensor:
    if model.L is None:
        raise ValueError("model has no language encoder")
    return model.L(list(tokens))


language_task_or_meta_embedding = language_embedding


@dataclass
class EmbeddingCache:
    """Detached task embeddings, refreshed once per epoch."""

    embeddings: dict = field(default_factory=dict)
    epoch: int = -1

    def __getitem__(self, task_id: str) -> np.ndarray:
        return self.embeddings[task_id]

    def __contains__(self, task_id: str) -> bool:
        return task_id in self.embeddings

    def __len__(self) -> int:
        return len(self.embeddings)

    def stack(self, task_ids: Sequence[str]) -> np.ndarray:
        return np.concatenate([self.embeddings[t] for t in task_ids], axis=0)


def refresh_embedding_cache(model: HommModel, example_batches: dict, epoch: int,
                            cache: EmbeddingCache | None = None) -> EmbeddingCache:
    """Recompute every task embedding from its example batch, off the tape."""
    cache = EmbeddingCache() if cache is None else cache
    fresh = {}
    for task_id, batch in example_batches.items():
        fresh[task_id] = embed_task(model, batch).data.copy()
    cache.embeddings = fresh
    cache.epoch = epoch
    return cache
