"""Feature extractor, GCN head, the two classifiers and the domain discriminator."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import LabelGraph

# Keeps discriminator outputs away from the log singularities of BCE.
PROB_EPS = 1e-7


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class MlpStack:
    """Affine layers with rectifiers between them and a linear last layer."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError(f"an MLP needs at least input and output sizes, got {list(sizes)}")
        self.sizes = tuple(int(s) for s in sizes)
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = glorot_uniform(rng, fan_in, fan_out) if rng is not None else np.zeros((fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
            self.biases.append(Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.b{i}"))

    @property
    def in_width(self) -> int:
        return self.sizes[0]

    @property
    def out_width(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_width:
            raise ShapeError(f"{self.name}: expects width {self.in_width}, got input {x.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, w), b)
            if i < last:
                x = ad.relu(x)
        return x


class GcnHead:
    """Stacked ``Z = P X Theta`` layers, rectified between layers, no bias."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, name: str = "gcn"):
        if len(sizes) < 2:
            raise ValueError(f"a GCN head needs at least one filter, got sizes {list(sizes)}")
        self.sizes = tuple(int(s) for s in sizes)
        self.name = name
        self.filters = [
            Tensor(
                glorot_uniform(rng, fi, fo) if rng is not None else np.zeros((fi, fo)),
                requires_grad=True,
                name=f"{name}.theta{i}",
            )
            for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:]))
        ]

    @property
    def in_width(self) -> int:
        return self.sizes[0]

    @property
    def out_width(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Tensor]:
        return list(self.filters)


def feature_extract(extractor: MlpStack, inputs) -> Tensor:
    return extractor(ad.as_tensor(inputs))


def gcn_forward(head: GcnHead, x: Tensor, graph: LabelGraph) -> Tensor:
    if graph.n != x.shape[0]:
        raise ShapeError(f"gcn_forward: graph has {graph.n} nodes but features have shape {x.shape}")
    if x.shape[1] != head.in_width:
        raise ShapeError(f"gcn_forward: first filter expects width {head.in_width}, got {x.shape}")
    prop = Tensor(graph.propagation)
    last = len(head.filters) - 1
    for i, theta in enumerate(head.filters):
        x = ad.matmul(ad.matmul(prop, x), theta)
        if i < last:
            x = ad.relu(x)
    return x


def classify(classifier: MlpStack, feats: Tensor) -> Tensor:
    return classifier(feats)


def discriminator_logits(discriminator: MlpStack, graph_feats: Tensor, grl_coeff: float) -> Tensor:
    """Pre-sigmoid domain scores behind a gradient reversal of strength ``grl_coeff``."""
    if graph_feats.shape[1] != discriminator.in_width:
        raise ShapeError(f"discriminate: expects width {discriminator.in_width}, got {graph_feats.shape}")
    return discriminator(ad.gradient_reversal(graph_feats, grl_coeff))


def discriminate(discriminator: MlpStack, graph_feats: Tensor, grl_coeff: float) -> Tensor:
    """Probability that each row comes from the source domain, clamped into (0, 1)."""
    logits = discriminator_logits(discriminator, graph_feats, grl_coeff)
    return ad.clip(ad.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


@dataclass
class ModelSpec:
    input_dim: int
    num_classes: int
    feature_sizes: tuple[int, ...] = (128, 64)
    gcn_sizes: tuple[int, ...] = (64, 64, 64)
    disc_hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        self.feature_sizes = tuple(self.feature_sizes)
        self.gcn_sizes = tuple(self.gcn_sizes)
        self.disc_hidden = tuple(self.disc_hidden)

    @property
    def feature_dim(self) -> int:
        return self.feature_sizes[-1]


@dataclass
class GpdaModels:
    spec: ModelSpec
    seed: int
    extractor: MlpStack
    gcn: GcnHead
    source_classifier: MlpStack
    target_classifier: MlpStack
    discriminator: MlpStack
    # Per-feature input standardisation, identity unless fitted.
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    def fit_input_scaling(self, samples: np.ndarray) -> None:
        samples = np.asarray(samples, dtype=np.float64)
        self.input_mean = samples.mean(axis=0)
        std = samples.std(axis=0)
        self.input_std = np.where(std > 0, std, 1.0)

    def preprocess(self, inputs) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_std

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "E": self.extractor.parameters(),
            "G": self.gcn.parameters(),
            "Fs": self.source_classifier.parameters(),
            "Ft": self.target_classifier.parameters(),
            "D": self.discriminator.parameters(),
        }

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for group in self.groups().values():
            for p in group:
                yield p.name, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model shape {p.shape}")
            p.values = arr.copy()
            p.zero_grad()

    def predict_target(self, inputs) -> np.ndarray:
        """Softmax of F_t(E(x)), no graph involved."""
        feats = feature_extract(self.extractor, self.preprocess(inputs))
        return ad.softmax(classify(self.target_classifier, feats).values)

    def source_probs(self, inputs) -> np.ndarray:
        logits = classify(self.source_classifier, feature_extract(self.extractor, self.preprocess(inputs)))
        return ad.softmax(logits.values)


def init_params(spec: ModelSpec, seed: int) -> GpdaModels:
    """Glorot-uniform weights and zero biases, drawn in a fixed order from ``seed``."""
    rng = np.random.default_rng(seed)
    feat = spec.feature_dim
    if spec.gcn_sizes[0] != feat:
        raise ShapeError(f"GCN input width {spec.gcn_sizes[0]} must equal feature width {feat}")
    extractor = MlpStack((spec.input_dim, *spec.feature_sizes), rng, "E")
    gcn = GcnHead(spec.gcn_sizes, rng, "G")
    fs = MlpStack((feat, spec.num_classes), rng, "Fs")
    ft = MlpStack((feat, spec.num_classes), rng, "Ft")
    disc = MlpStack((spec.gcn_sizes[-1], *spec.disc_hidden, 1), rng, "D")
    return GpdaModels(spec, seed, extractor, gcn, fs, ft, disc)


# ---------------------------------------------------------------- checkpoints
#
# weights.bin: u32 count, then per array
#   u32 name_len | name utf-8 | u32 ndim | u64 dims[ndim] | f64 data (C order)
# all little-endian.  manifest.json carries the ModelSpec and seed.


def save_checkpoint(models: GpdaModels, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = models.state_dict()
    if models.input_mean is not None:
        state["input.mean"] = models.input_mean.reshape(1, -1)
        state["input.std"] = models.input_std.reshape(1, -1)
    with open(directory / "weights.bin", "wb") as fh:
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "input_dim": models.spec.input_dim,
        "num_classes": models.spec.num_classes,
        "feature_sizes": list(models.spec.feature_sizes),
        "gcn_sizes": list(models.spec.gcn_sizes),
        "disc_hidden": list(models.spec.disc_hidden),
        "seed": models.seed,
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (name_len,) = take("<I")
        (name,) = take(f"<{name_len}s")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(data):
            raise ValueError(f"{path}: truncated at byte {pos}")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        state[name.decode("utf-8")] = values.astype(np.float64).reshape(shape)
    return state


def load_checkpoint(directory: str | Path) -> GpdaModels:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = ModelSpec(
        manifest["input_dim"],
        manifest["num_classes"],
        tuple(manifest["feature_sizes"]),
        tuple(manifest["gcn_sizes"]),
        tuple(manifest["disc_hidden"]),
    )
    models = init_params(spec, manifest["seed"])
    state = read_weights(directory / "weights.bin")
    models.load_state_dict(state)
    if "input.mean" in state:
        models.input_mean = state["input.mean"].reshape(-1)
        models.input_std = state["input.std"].reshape(-1)
    return models
