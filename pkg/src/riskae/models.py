"""The four model families and their parameter persistence.

* TR-LA: transformer autoencoder with local attention (the case-study
  configuration: 4+4 blocks, 5 heads of dimension 5, feed-forward width
  16, latent dimension 10, window 5, layer norm off).
* TR-FU: the same architecture with the window opened to the full
  sequence, i.e. unrestricted self-attention.
* CONV:  1-D convolutional autoencoder (64/32/10 encoder filters,
  mirrored decoder, kernel size 3, same padding).
* FF-NN: feed-forward binary classifier (58-64-64-1, tanh/tanh/sigmoid).

Checkpoints use a self-describing binary container: a JSON header with a
format-version field, the model family, its spec, and parameter
names/shapes, followed by little-endian float64 payloads. The byte
stream is a pure function of the contents, so identical models produce
identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import attention as attn
from . import autodiff as ad
from .errors import CheckpointError, DataError, ShapeError

CHECKPOINT_MAGIC = b"RAE1"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# specs


@dataclass
class TransformerAutoencoderSpec:
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    ffn_dim: int = 16
    heads: int = 5
    head_dim: int = 5
    latent_dim: int = 10
    window: int | str = 5
    use_layer_norm: bool = False
    seq_len: int = 58

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    def validate(self) -> None:
        counts = (self.encoder_blocks, self.decoder_blocks, self.ffn_dim,
                  self.heads, self.head_dim, self.latent_dim, self.seq_len)
        if any(c < 1 for c in counts):
            raise ValueError("all transformer spec counts must be >= 1")
        if self.window != "full" and (not isinstance(self.window, int) or self.window < 1):
            raise ValueError(f"window must be a positive int or 'full', got {self.window!r}")


@dataclass
class ConvAutoencoderSpec:
    encoder_filters: tuple = (64, 32, 10)
    decoder_filters: tuple = (10, 32, 64)
    kernel_size: int = 3
    seq_len: int = 58

    def validate(self) -> None:
        if tuple(reversed(self.encoder_filters)) != tuple(self.decoder_filters):
            raise ValueError("decoder filters must mirror the encoder's in reverse")
        if self.kernel_size < 1 or self.seq_len < 1:
            raise ValueError("kernel_size and seq_len must be >= 1")


@dataclass
class FeedForwardSpec:
    seq_len: int = 58
    hidden: tuple = (64, 64)

    def validate(self) -> None:
        if self.seq_len < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer sizes must be >= 1")


# ---------------------------------------------------------------------------
# parameter store / checkpoints


class ParameterStore:
    """Named float64 arrays plus the metadata needed to rebuild a model."""

    def __init__(self, arrays: dict, model_family: str, spec: dict,
                 format_version: int = CHECKPOINT_VERSION):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.model_family = model_family
        self.spec = spec
        self.format_version = format_version


def save_checkpoint(store: ParameterStore, path) -> None:
    names = sorted(store.arrays)
    header = {
        "format_version": store.format_version,
        "model_family": store.model_family,
        "spec": store.spec,
        "params": [{"name": n, "shape": list(store.arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(store.arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterStore:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"not a checkpoint file: bad magic {magic!r}")
            hlen = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if "format_version" not in header:
                raise CheckpointError("checkpoint header missing format_version")
            if header["format_version"] != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version {header['format_version']}"
                )
            arrays = {}
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * 8)
                if len(buf) != count * 8:
                    raise CheckpointError(f"truncated payload for {entry['name']!r}")
                arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return ParameterStore(arrays, header["model_family"], header["spec"],
                          header["format_version"])


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.Tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)),
                     requires_grad=True)


def _zeros(shape):
    return ad.Tensor(np.zeros(shape), requires_grad=True)


class _ModelBase:
    """Parameter bookkeeping shared by every family."""

    family: str = ""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}

    def _add(self, name: str, tensor: ad.Tensor) -> ad.Tensor:
        self.params[name] = tensor
        return tensor

    def parameters(self) -> dict:
        return self.params

    def parameter_store(self) -> ParameterStore:
        return ParameterStore({n: t.values.copy() for n, t in self.params.items()},
                              self.family, asdict(self.spec))

    def load_parameters(self, store: ParameterStore) -> None:
        missing = sorted(set(self.params) - set(store.arrays))
        extra = sorted(set(store.arrays) - set(self.params))
        if missing or extra:
            raise CheckpointError(
                f"parameter mismatch: missing={missing} extra={extra}"
            )
        for name, tensor in self.params.items():
            arr = store.arrays[name]
            if arr.shape != tensor.values.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {tensor.values.shape}"
                )
            tensor.values = arr.astype(np.float64).copy()


# ---------------------------------------------------------------------------
# transformer autoencoder


class TransformerAutoencoder(_ModelBase):
    """Encoder/decoder transformer with masked self-attention blocks.

    The encoder projects the scalar feature to the block width, runs
    locally-masked attention blocks, pools over time and projects to the
    latent space. The decoder expands the latent vector back to a
    sequence, runs causally-masked blocks, and projects to one feature.
    """

    family = "tr-la"

    def __init__(self, spec: TransformerAutoencoderSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        if spec.window == "full":
            self.encoder_mask = attn.build_full_mask(spec.seq_len)
        else:
            self.encoder_mask = attn.build_local_mask(spec.seq_len, spec.window)
        self.decoder_mask = attn.build_causal_mask(spec.seq_len)
        rng = np.random.default_rng(seed)
        w = spec.width
        self._add("input_proj/w", _glorot(rng, 1, w))
        self._add("input_proj/b", _zeros(w))
        for side, count in (("encoder", spec.encoder_blocks), ("decoder", spec.decoder_blocks)):
            for i in range(count):
                prefix = f"{side}/{i}"
                ap = attn.init_attention_params(rng, spec.heads, spec.head_dim)
                for name, tensor in ap.named(f"{prefix}/attn").items():
                    self._add(name, tensor)
                self._add(f"{prefix}/ffn/w1", _glorot(rng, w, spec.ffn_dim))
                self._add(f"{prefix}/ffn/b1", _zeros(spec.ffn_dim))
                self._add(f"{prefix}/ffn/w2", _glorot(rng, spec.ffn_dim, w))
                self._add(f"{prefix}/ffn/b2", _zeros(w))
                if spec.use_layer_norm:
                    self._add(f"{prefix}/ln1/gain", ad.Tensor(np.ones(w), requires_grad=True))
                    self._add(f"{prefix}/ln1/bias", _zeros(w))
                    self._add(f"{prefix}/ln2/gain", ad.Tensor(np.ones(w), requires_grad=True))
                    self._add(f"{prefix}/ln2/bias", _zeros(w))
        self._add("latent_proj/w", _glorot(rng, w, spec.latent_dim))
        self._add("latent_proj/b", _zeros(spec.latent_dim))
        self._add("decoder_proj/w", _glorot(rng, spec.latent_dim, spec.seq_len * w))
        self._add("decoder_proj/b", _zeros(spec.seq_len * w))
        self._add("output_proj/w", _glorot(rng, w, 1))
        self._add("output_proj/b", _zeros(1))

    def _attention_params(self, prefix: str) -> attn.AttentionParams:
        p = self.params
        return attn.AttentionParams(
            wq=p[f"{prefix}/attn/wq"], bq=p[f"{prefix}/attn/bq"],
            wk=p[f"{prefix}/attn/wk"], bk=p[f"{prefix}/attn/bk"],
            wv=p[f"{prefix}/attn/wv"], bv=p[f"{prefix}/attn/bv"],
            wo=p[f"{prefix}/attn/wo"], bo=p[f"{prefix}/attn/bo"],
            heads=self.spec.heads, head_dim=self.spec.head_dim,
        )

    def _block(self, x: ad.Tensor, prefix: str, mask) -> ad.Tensor:
        p = self.params
        a = attn.multi_head_attention(x, self._attention_params(prefix), mask)
        x = x + a
        if self.spec.use_layer_norm:
            x = ad.layer_norm(x, p[f"{prefix}/ln1/gain"], p[f"{prefix}/ln1/bias"])
        h = ad.relu(ad.matmul(x, p[f"{prefix}/ffn/w1"]) + p[f"{prefix}/ffn/b1"])
        f = ad.matmul(h, p[f"{prefix}/ffn/w2"]) + p[f"{prefix}/ffn/b2"]
        x = x + f
        if self.spec.use_layer_norm:
            x = ad.layer_norm(x, p[f"{prefix}/ln2/gain"], p[f"{prefix}/ln2/bias"])
        return x

    def _coerce(self, batch) -> ad.Tensor:
        t = ad.as_tensor(batch)
        if t.values.ndim == 2:
            t = ad.reshape(t, t.values.shape + (1,))
        if t.values.ndim != 3 or t.values.shape[1] != self.spec.seq_len or t.values.shape[2] != 1:
            raise ShapeError(
                f"expected batch (B, {self.spec.seq_len}, 1), got {t.values.shape}"
            )
        return t

    def encode(self, batch) -> ad.Tensor:
        """Map (B, seq_len, 1) inputs to (B, latent_dim) latent vectors."""
        x = self._coerce(batch)
        p = self.params
        x = ad.matmul(x, p["input_proj/w"]) + p["input_proj/b"]
        for i in range(self.spec.encoder_blocks):
            x = self._block(x, f"encoder/{i}", self.encoder_mask)
        pooled = ad.mean(x, axis=1)
        return ad.matmul(pooled, p["latent_proj/w"]) + p["latent_proj/b"]

    def decode(self, latents) -> ad.Tensor:
        """Map (B, latent_dim) latent vectors to (B, seq_len, 1) reconstructions."""
        z = ad.as_tensor(latents)
        if z.values.ndim != 2 or z.values.shape[1] != self.spec.latent_dim:
            raise ShapeError(
                f"expected latents (B, {self.spec.latent_dim}), got {z.values.shape}"
            )
        p = self.params
        x = ad.matmul(z, p["decoder_proj/w"]) + p["decoder_proj/b"]
        x = ad.reshape(x, (z.values.shape[0], self.spec.seq_len, self.spec.width))
        for i in range(self.spec.decoder_blocks):
            x = self._block(x, f"decoder/{i}", self.decoder_mask)
        return ad.matmul(x, p["output_proj/w"]) + p["output_proj/b"]

    def forward(self, batch) -> ad.Tensor:
        return self.decode(self.encode(batch))


class FullAttentionAutoencoder(TransformerAutoencoder):
    """TR-FU: the transformer autoencoder with an unrestricted window."""

    family = "tr-fu"

    def __init__(self, spec: TransformerAutoencoderSpec | None = None, seed: int = 0):
        spec = replace(spec, window="full") if spec else TransformerAutoencoderSpec(window="full")
        super().__init__(spec, seed)


# ---------------------------------------------------------------------------
# convolutional autoencoder


class ConvAutoencoder(_ModelBase):
    """1-D convolutional autoencoder with a mirrored transposed decoder."""

    family = "conv"

    def __init__(self, spec: ConvAutoencoderSpec | None = None, seed: int = 0):
        super().__init__()
        spec = spec or ConvAutoencoderSpec()
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        k = spec.kernel_size
        cin = 1
        for i, cout in enumerate(spec.encoder_filters):
            self._add(f"encoder/{i}/w", _glorot(rng, k * cin, cout, shape=(k, cin, cout)))
            self._add(f"encoder/{i}/b", _zeros(cout))
            cin = cout
        for i, cout in enumerate(spec.decoder_filters):
            self._add(f"decoder/{i}/w", _glorot(rng, k * cin, cout, shape=(k, cout, cin)))
            self._add(f"decoder/{i}/b", _zeros(cout))
            cin = cout
        self._add("output/w", _glorot(rng, k * cin, 1, shape=(k, cin, 1)))
        self._add("output/b", _zeros(1))

    def forward(self, batch) -> ad.Tensor:
        t = ad.as_tensor(batch)
        if t.values.ndim == 2:
            t = ad.reshape(t, t.values.shape + (1,))
        if t.values.ndim != 3 or t.values.shape[1] != self.spec.seq_len or t.values.shape[2] != 1:
            raise ShapeError(
                f"expected batch (B, {self.spec.seq_len}, 1), got {t.values.shape}"
            )
        p = self.params
        x = t
        for i in range(len(self.spec.encoder_filters)):
            x = ad.relu(ad.conv1d(x, p[f"encoder/{i}/w"]) + p[f"encoder/{i}/b"])
        for i in range(len(self.spec.decoder_filters)):
            x = ad.relu(ad.conv1d_transpose(x, p[f"decoder/{i}/w"]) + p[f"decoder/{i}/b"])
        return ad.conv1d(x, p["output/w"]) + p["output/b"]


# ---------------------------------------------------------------------------
# feed-forward classifier


class FeedForwardClassifier(_ModelBase):
    """Two tanh hidden layers and a sigmoid output unit."""

    family = "ff-nn"

    def __init__(self, spec: FeedForwardSpec | None = None, seed: int = 0):
        super().__init__()
        spec = spec or FeedForwardSpec()
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        sizes = (spec.seq_len,) + tuple(spec.hidden) + (1,)
        for i in range(len(sizes) - 1):
            self._add(f"layer/{i}/w", _glorot(rng, sizes[i], sizes[i + 1]))
            self._add(f"layer/{i}/b", _zeros(sizes[i + 1]))

    def _coerce(self, batch) -> ad.Tensor:
        t = ad.as_tensor(batch)
        if t.values.ndim == 3 and t.values.shape[2] == 1:
            t = ad.reshape(t, t.values.shape[:2])
        if t.values.ndim != 2 or t.values.shape[1] != self.spec.seq_len:
            raise ShapeError(
                f"expected batch (B, {self.spec.seq_len}), got {t.values.shape}"
            )
        return t

    def logits(self, batch) -> ad.Tensor:
        """Pre-sigmoid scores, shape (B, 1)."""
        x = self._coerce(batch)
        p = self.params
        n_layers = len(self.spec.hidden) + 1
        for i in range(n_layers):
            x = ad.matmul(x, p[f"layer/{i}/w"]) + p[f"layer/{i}/b"]
            if i < n_layers - 1:
                x = ad.tanh(x)
        return x

    def score(self, batch) -> np.ndarray:
        """Probability of the positive class per sample, strictly in (0, 1)."""
        with ad.no_grad():
            return ad.sigmoid(self.logits(batch)).values[:, 0]


# ---------------------------------------------------------------------------
# reconstruction errors


def reconstruction_error(x, x_rec) -> np.ndarray:
    """Per-sample mean squared error over time steps and features."""
    x = np.asarray(x, dtype=np.float64)
    x_rec = np.asarray(x_rec, dtype=np.float64)
    if x.shape != x_rec.shape:
        raise ShapeError(f"reconstruction_error: shapes {x.shape} vs {x_rec.shape}")
    diff = (x - x_rec) ** 2
    return diff.reshape(x.shape[0], -1).mean(axis=1)


def reconstruction_errors(model, data, batch_size: int = 1024) -> np.ndarray:
    """Per-sample reconstruction errors over a dataset, fixed batch order."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise DataError("reconstruction_errors: empty dataset")
    out = []
    with ad.no_grad():
        for start in range(0, data.shape[0], batch_size):
            chunk = data[start : start + batch_size]
            rec = model.forward(chunk).values
            out.append(reconstruction_error(chunk.reshape(rec.shape), rec))
    return np.concatenate(out)


def average_reconstruction_error(model, data, batch_size: int = 1024) -> float:
    """Arithmetic mean of per-sample reconstruction errors (RE of a set)."""
    return float(reconstruction_errors(model, data, batch_size).mean())


# ---------------------------------------------------------------------------
# registry


MODEL_FAMILIES = ("tr-la", "tr-fu", "conv", "ff-nn")

_SPEC_TYPES = {
    "tr-la": TransformerAutoencoderSpec,
    "tr-fu": TransformerAutoencoderSpec,
    "conv": ConvAutoencoderSpec,
    "ff-nn": FeedForwardSpec,
}

_MODEL_TYPES = {
    "tr-la": TransformerAutoencoder,
    "tr-fu": FullAttentionAutoencoder,
    "conv": ConvAutoencoder,
    "ff-nn": FeedForwardClassifier,
}


def build_model(family: str, spec_kwargs: dict | None = None, seed: int = 0):
    """Construct a model by CLI family name with optional spec overrides."""
    if family not in _MODEL_TYPES:
        raise ValueError(f"unknown model family {family!r}; choose from {MODEL_FAMILIES}")
    kwargs = dict(spec_kwargs or {})
    if family == "tr-fu":
        kwargs.pop("window", None)
    spec_type = _SPEC_TYPES[family]
    known = {f.name for f in spec_type.__dataclass_fields__.values()}
    unknown = set(kwargs) - known
    if unknown:
        raise ValueError(f"unknown spec fields for {family}: {sorted(unknown)}")
    spec = spec_type(**kwargs)
    return _MODEL_TYPES[family](spec, seed=seed)


def model_from_checkpoint(store: ParameterStore):
    """Rebuild a model of the stored family/spec and load its parameters."""
    family = store.model_family
    if family not in _MODEL_TYPES:
        raise CheckpointError(f"checkpoint names unknown model family {family!r}")
    spec_kwargs = dict(store.spec)
    for key in ("encoder_filters", "decoder_filters", "hidden"):
        if key in spec_kwargs and isinstance(spec_kwargs[key], list):
            spec_kwargs[key] = tuple(spec_kwargs[key])
    spec = _SPEC_TYPES[family](**spec_kwargs)
    model = _MODEL_TYPES[family](spec, seed=0)
    model.load_parameters(store)
    return model
