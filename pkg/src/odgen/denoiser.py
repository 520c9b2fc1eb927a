"""Graph transformer that predicts the noise component of a corrupted OD matrix.

Nodes carry region-feature embeddings, edges carry embeddings of the noisy
flow values plus a sinusoidal timestep encoding. Attention logits mix scaled
dot-product scores with a learned bias computed from the edge embedding and
an adjacency prior; edge states are refreshed each layer from the pre-softmax
logits of every head plus a distance prior. No residual connections, layer
norm, or dropout anywhere. Attention is dense across all region pairs by
default; a config flag restricts it to graph neighbors plus self.

The spatial priors (adjacency and distance) can be switched off for ablation
runs, in which case their contributions are exactly zero while the parameter
set keeps the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, MLP, Tensor
from .errors import ValidationError


@dataclass(frozen=True)
class DenoiserConfig:
    n_features: int
    hidden: int = 32
    layers: int = 4
    heads: int = 4
    use_spatial_priors: bool = True
    restrict_to_adjacency: bool = False

    def __post_init__(self):
        if self.n_features < 1 or self.hidden < 1 or self.layers < 1 or self.heads < 1:
            raise ValidationError("denoiser dimensions must be positive")
        if self.hidden % self.heads != 0:
            raise ValidationError(
                f"hidden size {self.hidden} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "use_spatial_priors": self.use_spatial_priors,
            "restrict_to_adjacency": self.restrict_to_adjacency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{k: d[k] for k in (
            "n_features", "hidden", "layers", "heads",
            "use_spatial_priors", "restrict_to_adjacency") if k in d})


def sinusoidal_time_embedding(t: int, dim: int) -> np.ndarray:
    """Classic sin/cos positional code for an integer diffusion timestep."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = float(t) * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


def normalize_distance(distance: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1] over off-diagonal entries, diagonal pinned at 0.

    Distances are city-specific in scale; without this the distance prior
    would be dominated by whichever city spans more kilometers.
    """
    n = distance.shape[0]
    off = ~np.eye(n, dtype=bool)
    out = np.zeros_like(np.asarray(distance, dtype=np.float64))
    if n < 2:
        return out
    lo = float(distance[off].min())
    hi = float(distance[off].max())
    if hi > lo:
        out[off] = (distance[off] - lo) / (hi - lo)
    return out


class _AttentionLayer:
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        h, dk, K = cfg.hidden, cfg.head_dim, cfg.heads
        self.cfg = cfg
        self.query = [Linear(h, dk, rng) for _ in range(K)]
        self.key = [Linear(h, dk, rng) for _ in range(K)]
        self.value = [Linear(h, dk, rng) for _ in range(K)]
        self.edge_bias = Linear(2 * h, h, rng)
        self.head_bias = [Linear(h, 1, rng) for _ in range(K)]
        self.out_node = MLP(h, h, h, rng)
        self.out_edge = MLP(K, h, h, rng)

    def parameters(self, prefix: str) -> dict:
        out = {}
        for k in range(self.cfg.heads):
            out.update(self.query[k].parameters(f"{prefix}.q{k}"))
            out.update(self.key[k].parameters(f"{prefix}.k{k}"))
            out.update(self.value[k].parameters(f"{prefix}.v{k}"))
            out.update(self.head_bias[k].parameters(f"{prefix}.hb{k}"))
        out.update(self.edge_bias.parameters(f"{prefix}.edge_bias"))
        out.update(self.out_node.parameters(f"{prefix}.out_node"))
        out.update(self.out_edge.parameters(f"{prefix}.out_edge"))
        return out

    def __call__(self, H: Tensor, E: Tensor, s_adj: Tensor, n: int,
                 mask: np.ndarray | None, collect: list | None):
        cfg = self.cfg
        bias_feat = ad.relu(self.edge_bias(ad.concat([E, s_adj], axis=1)))
        inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
        messages = []
        raw_logits = []
        alphas = []
        for k in range(cfg.heads):
            q = self.query[k](H)
            key = self.key[k](H)
            v = self.value[k](H)
            dots = ad.scale(ad.matmul(q, ad.transpose(key)), inv_sqrt)
            bias = ad.reshape(self.head_bias[k](bias_feat), (n, n))
            logits = ad.add(dots, bias)
            alpha = ad.softmax_masked(logits, axis=1, mask=mask)
            if collect is not None:
                alphas.append(alpha.data.copy())
            messages.append(ad.matmul(alpha, v))
            raw_logits.append(ad.reshape(logits, (n * n, 1)))
        if collect is not None:
            collect.append(np.stack(alphas))
        H_new = self.out_node(ad.concat(messages, axis=1))
        E_new = self.out_edge(ad.concat(raw_logits, axis=1))
        return H_new, E_new


class Denoiser:
    """Noise predictor over log-space OD matrices, conditioned on the graph."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        h = config.hidden
        self.node_in = MLP(config.n_features, h, h, rng)
        self.edge_in = MLP(1, h, h, rng)
        self.adj_prior = Linear(1, h, rng)
        self.dis_prior = Linear(1, h, rng)
        self.attn = [_AttentionLayer(config, rng) for _ in range(config.layers)]
        self.out_mlp = MLP(h, h, 1, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> dict:
        out = self.node_in.parameters("node_in")
        out.update(self.edge_in.parameters("edge_in"))
        out.update(self.adj_prior.parameters("adj_prior"))
        out.update(self.dis_prior.parameters("dis_prior"))
        for i, layer in enumerate(self.attn):
            out.update(layer.parameters(f"attn{i}"))
        out.update(self.out_mlp.parameters("out_mlp"))
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    @staticmethod
    def expected_n_parameters(cfg: DenoiserConfig) -> int:
        h, dk, K, L, d = cfg.hidden, cfg.head_dim, cfg.heads, cfg.layers, cfg.n_features
        node_in = (h * d + h) + (h * h + h)
        edge_in = (h * 1 + h) + (h * h + h)
        priors = 2 * (h * 1 + h)
        per_layer = (3 * K * (dk * h + dk)                  # q, k, v per head
                     + (h * 2 * h + h)                      # edge bias trunk
                     + K * (h + 1)                          # per-head bias heads
                     + (h * h + h) + (h * h + h)            # node output MLP
                     + (h * K + h) + (h * h + h))           # edge output MLP
        out_mlp = (h * h + h) + (h + 1)
        return node_in + edge_in + priors + L * per_layer + out_mlp

    # -- forward --------------------------------------------------------------

    def _check_inputs(self, features, adjacency, distance, flows_t):
        n = features.shape[0]
        if features.ndim != 2 or features.shape[1] != self.config.n_features:
            raise ValidationError(
                f"expected features with {self.config.n_features} columns, "
                f"got shape {features.shape}")
        for name, m in (("adjacency", adjacency), ("distance", distance),
                        ("flows", flows_t)):
            if m.shape != (n, n):
                raise ValidationError(f"{name} shape {m.shape} != ({n}, {n})")
        return n

    def forward(self, features: np.ndarray, adjacency: np.ndarray,
                distance: np.ndarray, flows_t: np.ndarray, t: int,
                collect_attention: bool = False):
        """Run the network; returns (eps_hat Tensor of shape (n*n, 1), attention).

        `attention` is a list with one (heads, n, n) array per layer when
        requested, else None. Gradients flow into the parameters and into
        none of the numpy inputs.
        """
        cfg = self.config
        n = self._check_inputs(features, adjacency, distance, flows_t)

        H = self.node_in(Tensor(features))
        E = self.edge_in(Tensor(flows_t.reshape(n * n, 1)))
        E = ad.add(E, Tensor(sinusoidal_time_embedding(t, cfg.hidden)))

        if cfg.use_spatial_priors:
            s_adj = self.adj_prior(Tensor(adjacency.reshape(n * n, 1)))
            s_dis = self.dis_prior(
                Tensor(normalize_distance(distance).reshape(n * n, 1)))
        else:
            s_adj = Tensor(np.zeros((n * n, cfg.hidden)))
            s_dis = Tensor(np.zeros((n * n, cfg.hidden)))

        mask = None
        if cfg.restrict_to_adjacency:
            allowed = (adjacency > 0) | np.eye(n, dtype=bool)
            mask = ~allowed

        attention = [] if collect_attention else None
        for layer in self.attn:
            H, E = layer(H, E, s_adj, n, mask, attention)
            E = ad.add(E, s_dis)

        eps_hat = self.out_mlp(E)
        return eps_hat, attention

    def predict_noise(self, features, adjacency, distance, flows_t, t) -> np.ndarray:
        """Plain-array forward pass: (n, n) predicted noise."""
        n = features.shape[0]
        eps_hat, _ = self.forward(features, adjacency, distance, flows_t, t)
        return eps_hat.data.reshape(n, n).copy()

    def attention_maps(self, features, adjacency, distance, flows_t, t):
        """Post-softmax attention per layer, each (heads, n, n)."""
        _, attention = self.forward(features, adjacency, distance, flows_t, t,
                                    collect_attention=True)
        return attention

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ValidationError(f"checkpoint missing parameters: {missing[:4]}")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ValidationError(
                    f"parameter {name}: checkpoint shape {a.shape} != {p.data.shape}")
            p.data = a.copy()

    def save(self, path: str, extra_manifest: dict | None = None) -> None:
        manifest = {"model_config": self.config.to_dict()}
        manifest.update(extra_manifest or {})
        ad.save_checkpoint(path, self.state_arrays(), manifest)

    @classmethod
    def load(cls, path: str):
        """Rebuild a denoiser from a checkpoint; returns (model, manifest)."""
        arrays, manifest = ad.load_checkpoint(path)
        if "model_config" not in manifest:
            raise ValidationError(f"{path}.json sidecar lacks model_config")
        model = cls(DenoiserConfig.from_dict(manifest["model_config"]), seed=0)
        model.load_state_arrays({k: v for k, v in arrays.items()
                                 if not k.startswith("opt.")})
        return model, manifest
