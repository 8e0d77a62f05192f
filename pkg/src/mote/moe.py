"""Synthetic MoE layer: router, gated experts, forward pass and the
per-fact quantities (gates, keys, residuals) consumed by the editors."""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io

LAYOUTS = ("standard", "transposed_packed")


def silu(z):
    return z / (1.0 + np.exp(-z))


ACTIVATIONS = {
    "silu": silu,
    "identity": lambda z: z,
}


@dataclass(frozen=True)
class MoELayer:
    """One MoE FFN layer.

    ``down_w`` is kept in its storage layout: (E, d_model, d_hidden) for
    ``standard`` and (E, d_hidden, d_model) for ``transposed_packed``.
    Use :meth:`down` / :meth:`expert_down` to read it in standard
    orientation.
    """

    expert_embeddings: np.ndarray  # (E, d_model)
    gate_w: np.ndarray  # (E, d_hidden, d_model)
    up_w: np.ndarray  # (E, d_hidden, d_model)
    down_w: np.ndarray
    top_k: int
    layout: str = "standard"
    activation: str = "silu"
    seed: int | None = None

    def __post_init__(self):
        E, d_model = self.expert_embeddings.shape
        if not 1 <= self.top_k <= E:
            raise ValueError(f"top_k must be in [1, {E}], got {self.top_k}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        d_hidden = self.gate_w.shape[1]
        for name, arr, shape in [
            ("gate_w", self.gate_w, (E, d_hidden, d_model)),
            ("up_w", self.up_w, (E, d_hidden, d_model)),
            ("down_w", self.down_w, self._stored_shape(E, d_model, d_hidden)),
        ]:
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    def _stored_shape(self, E, d_model, d_hidden):
        if self.layout == "standard":
            return (E, d_model, d_hidden)
        return (E, d_hidden, d_model)

    @property
    def n_experts(self):
        return self.expert_embeddings.shape[0]

    @property
    def d_model(self):
        return self.expert_embeddings.shape[1]

    @property
    def d_hidden(self):
        return self.gate_w.shape[1]

    def down(self):
        """Stacked down-projections as an (E, d_model, d_hidden) tensor."""
        if self.layout == "standard":
            return self.down_w
        return self.down_w.transpose(0, 2, 1)

    def expert_down(self, j):
        if self.layout == "standard":
            return self.down_w[j]
        return self.down_w[j].T

    def with_down(self, down):
        """Copy of the layer with new (standard-orientation) down weights."""
        down = np.asarray(down, dtype=np.float64)
        if self.layout == "transposed_packed":
            down = down.transpose(0, 2, 1)
        return replace(self, down_w=np.ascontiguousarray(down))

    def with_layout(self, layout):
        down = self.down()
        if layout == "transposed_packed":
            down = down.transpose(0, 2, 1)
        return replace(self, layout=layout, down_w=np.ascontiguousarray(down))


def random_layer(E, K, d_model, d_hidden, seed=0, *, layout="standard",
                 activation="silu", structure_ranks=None, noise=0.3):
    """Random layer whose stacked down-projections share low multilinear
    rank structure plus isotropic noise, mimicking co-trained experts."""
    if not 1 <= K <= E:
        raise ValueError(f"K must be in [1, E={E}], got {K}")
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((E, d_model)) / np.sqrt(d_model)
    gate = rng.standard_normal((E, d_hidden, d_model)) / np.sqrt(d_model)
    up = rng.standard_normal((E, d_hidden, d_model)) / np.sqrt(d_model)
    if structure_ranks is None:
        structure_ranks = (max(1, E // 2), max(1, d_model // 4), max(1, d_hidden // 4))
    re, ro, ri = structure_ranks
    core = rng.standard_normal((re, ro, ri))
    ue = np.linalg.qr(rng.standard_normal((E, re)))[0]
    uo = np.linalg.qr(rng.standard_normal((d_model, ro)))[0]
    ui = np.linalg.qr(rng.standard_normal((d_hidden, ri)))[0]
    down = np.einsum("abc,ja,ob,ic->joi", core, ue, uo, ui)
    down *= np.sqrt(E * d_model * d_hidden / max(np.sum(down**2), 1e-300)) / np.sqrt(d_hidden)
    down += noise * rng.standard_normal((E, d_model, d_hidden)) / np.sqrt(d_hidden)
    layer = MoELayer(emb, gate, up, down, K, activation=activation, seed=seed)
    return layer.with_layout(layout)


@dataclass(frozen=True)
class GatingResult:
    selected: tuple  # expert indices, in descending logit order
    weights: np.ndarray  # (E,), K-sparse


def router_logits(layer, x):
    return layer.expert_embeddings @ np.asarray(x, dtype=np.float64)


def route(layer, x):
    """Top-K routing with softmax renormalised over the selected logits.

    Ties are broken by the lowest expert index.
    """
    s = router_logits(layer, x)
    order = np.argsort(-s, kind="stable")[: layer.top_k]
    z = s[order] - s[order].max()
    p = np.exp(z)
    g = np.zeros(layer.n_experts)
    g[order] = p / p.sum()
    return GatingResult(tuple(int(j) for j in order), g)


def route_many(layer, xs):
    """Selected-expert sets for a batch of inputs, shape (n, K)."""
    s = np.atleast_2d(xs) @ layer.expert_embeddings.T
    return np.argsort(-s, axis=1, kind="stable")[:, : layer.top_k]


def expert_key(layer, j, x):
    x = np.asarray(x, dtype=np.float64)
    act = ACTIVATIONS[layer.activation]
    return act(layer.gate_w[j] @ x) * (layer.up_w[j] @ x)


def expert_keys(layer, x, selected=None):
    """(E, d_hidden) key matrix; rows of unselected experts are zero."""
    keys = np.zeros((layer.n_experts, layer.d_hidden))
    experts = range(layer.n_experts) if selected is None else selected
    for j in experts:
        keys[j] = expert_key(layer, j, x)
    return keys


def moe_forward(layer, x):
    gating = route(layer, x)
    out = np.zeros(layer.d_model)
    for j in gating.selected:
        out += gating.weights[j] * (layer.expert_down(j) @ expert_key(layer, j, x))
    return out


@dataclass(frozen=True)
class Fact:
    x: np.ndarray
    target_v: np.ndarray
    gating: GatingResult
    keys: np.ndarray  # (E, d_hidden), zero rows for unselected experts


def make_fact(layer, x, target_v):
    x = np.asarray(x, dtype=np.float64)
    gating = route(layer, x)
    return Fact(x, np.asarray(target_v, dtype=np.float64), gating,
                expert_keys(layer, x, gating.selected))


def cached_output(layer, fact):
    """Mixture output from the fact's cached gating and keys."""
    down = layer.down()
    return np.einsum("j,joi,ji->o", fact.gating.weights, down, fact.keys)


def compute_residual(layer, fact):
    return fact.target_v - cached_output(layer, fact)


@dataclass
class EditBatch:
    facts: list
    lam: float = 1.0

    def __post_init__(self):
        if not self.facts:
            raise ValueError("an edit batch needs at least one fact")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def __len__(self):
        return len(self.facts)

    @property
    def gates(self):
        return np.stack([f.gating.weights for f in self.facts])

    @property
    def keys(self):
        return np.stack([f.keys for f in self.facts])

    @property
    def inputs(self):
        return np.stack([f.x for f in self.facts])

    @property
    def targets(self):
        return np.stack([f.target_v for f in self.facts])

    def residuals(self, layer):
        """(d_model, T) residual matrix R against `layer`."""
        out = np.einsum("tj,joi,tji->to", self.gates, layer.down(), self.keys)
        return (self.targets - out).T

    def recached(self, layer):
        """Same inputs/targets with gating and keys recomputed at `layer`."""
        return EditBatch([make_fact(layer, f.x, f.target_v) for f in self.facts], self.lam)


def synthesize_batch(layer, T, seed, residual_scale=1.0, lam=1.0, input_scale=1.0):
    """Facts whose targets are the current output plus a random direction
    of norm exactly `residual_scale`."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    facts = []
    for _ in range(T):
        x = input_scale * rng.standard_normal(layer.d_model)
        d = rng.standard_normal(layer.d_model)
        d /= np.linalg.norm(d)
        fact = make_fact(layer, x, np.zeros(layer.d_model))
        target = cached_output(layer, fact) + residual_scale * d
        facts.append(replace(fact, target_v=target))
    return EditBatch(facts, lam)


@dataclass
class PreservationSet:
    """Preservation keys grouped per expert.

    ``expert_keys[j]`` is a (d_hidden, M_j) matrix. When built from inputs
    the routed gates/keys are kept too, so the preservation term can be
    evaluated in its gated form.
    """

    expert_keys: list
    inputs: np.ndarray | None = None
    gates: np.ndarray | None = None  # (M, E)
    keys: np.ndarray | None = None  # (M, E, d_hidden)

    @property
    def n_experts(self):
        return len(self.expert_keys)

    @property
    def sample_count(self):
        return sum(k.shape[1] for k in self.expert_keys)

    @classmethod
    def empty(cls, E, d_hidden):
        return cls([np.zeros((d_hidden, 0)) for _ in range(E)])

    @classmethod
    def from_inputs(cls, layer, inputs):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        gates = np.zeros((len(inputs), layer.n_experts))
        keys = np.zeros((len(inputs), layer.n_experts, layer.d_hidden))
        for m, x in enumerate(inputs):
            g = route(layer, x)
            gates[m] = g.weights
            keys[m] = expert_keys(layer, x, g.selected)
        # keys of unselected experts are not preservation samples
        per_expert = [keys[gates[:, j] > 0, j, :].T.copy() for j in range(layer.n_experts)]
        return cls(per_expert, inputs, gates, keys)


def synthesize_preservation_inputs(d_model, M, seed, subspace_dim=None, noise=0.0, input_scale=1.0):
    """Preservation hidden states, optionally concentrated near a
    `subspace_dim`-dimensional subspace."""
    rng = np.random.default_rng(seed)
    if subspace_dim is None:
        return input_scale * rng.standard_normal((M, d_model))
    basis = np.linalg.qr(rng.standard_normal((d_model, subspace_dim)))[0]
    z = rng.standard_normal((M, subspace_dim)) * np.sqrt(d_model / subspace_dim)
    return input_scale * (z @ basis.T + noise * rng.standard_normal((M, d_model)))


# -- serialization ---------------------------------------------------------

def save_layer(layer, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.save_array(d / "router.mte", layer.expert_embeddings)
    io.save_array(d / "gate.mte", layer.gate_w)
    io.save_array(d / "up.mte", layer.up_w)
    io.save_array(d / "down.mte", layer.down_w)
    io.save_manifest(d / "manifest.json", {
        "E": layer.n_experts, "K": layer.top_k, "d_model": layer.d_model,
        "d_hidden": layer.d_hidden, "layout": layer.layout,
        "activation": layer.activation, "seed": layer.seed,
    })


def load_layer(directory):
    d = Path(directory)
    m = io.load_manifest(d / "manifest.json")
    layer = MoELayer(io.load_array(d / "router.mte"), io.load_array(d / "gate.mte"),
                     io.load_array(d / "up.mte"), io.load_array(d / "down.mte"),
                     m["K"], layout=m["layout"], activation=m["activation"], seed=m["seed"])
    if (layer.n_experts, layer.d_model, layer.d_hidden) != (m["E"], m["d_model"], m["d_hidden"]):
        raise io.FormatError(f"layer arrays in {d} disagree with manifest dims")
    return layer


def save_batch(batch, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.save_array(d / "inputs.mte", batch.inputs)
    io.save_array(d / "targets.mte", batch.targets)
    io.save_array(d / "gates.mte", batch.gates)
    io.save_array(d / "keys.mte", batch.keys)
    io.save_manifest(d / "manifest.json", {"T": len(batch), "lambda": batch.lam})


def load_batch(directory):
    d = Path(directory)
    m = io.load_manifest(d / "manifest.json")
    xs, vs = io.load_array(d / "inputs.mte"), io.load_array(d / "targets.mte")
    gates, keys = io.load_array(d / "gates.mte"), io.load_array(d / "keys.mte")
    if not len(xs) == len(vs) == len(gates) == len(keys) == m["T"]:
        raise io.FormatError(f"batch arrays in {d} disagree with manifest T")
    facts = []
    for x, v, g, k in zip(xs, vs, gates, keys):
        # descending gate weight reproduces descending-logit order
        selected = tuple(int(j) for j in np.argsort(-g, kind="stable")[: int(np.count_nonzero(g))])
        facts.append(Fact(x, v, GatingResult(selected, g), k))
    return EditBatch(facts, m["lambda"])
