"""The learned pipeline: image encoder, shape decoder, pattern learners,
pattern modularizer, and modularization customizer.

The forward pass maps an image to a reconstruction in six stages: predict an
initial cloud, split it into voxel regions, encode each centered region,
decode every pattern against the region feature (modularization), translate
back to the object frame, then shift each point with an image-conditioned
residual (customization).  Rows whose source region slot was padding are
dropped from the final cloud.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import DTensor, Parameter
from .errors import ConfigError, ContractError, NumericalAbort

CHECKPOINT_MAGIC = b"PMOD"
CHECKPOINT_VERSION = 1

_CONV_STRIDES = (2, 1, 2, 1, 2, 1, 2)
_CONV_KERNEL = 3
_CONV_PAD = 1


@dataclass
class ModelConfig:
    """Hyperparameters of the reconstruction pipeline (defaults = paper scale)."""

    s_points: int = 2048  # initial prediction size
    f_points: int = 2048  # final reconstruction size
    regions: int = 8
    patterns: int = 8
    pattern_points: int = 256
    image_feat: int = 1024
    region_feat: int = 64
    image_size: int = 64
    image_channels: int = 1
    sampling_mode: str = "voxel"
    pattern_extent: float = 0.5
    conv_channels: tuple[int, ...] = (16, 32, 32, 64, 64, 128, 128)
    no_local: bool = False
    no_patterns: bool = False
    no_shift: bool = False

    def __post_init__(self):
        if self.s_points != self.f_points:
            raise ConfigError(f"initial and final point counts must match: {self.s_points} != {self.f_points}")
        edge = round(self.regions ** (1.0 / 3.0))
        if edge**3 != self.regions:
            raise ConfigError(f"region count must be a perfect cube, got {self.regions}")
        if self.sampling_mode not in ("voxel", "plane"):
            raise ConfigError(f"sampling_mode must be voxel or plane, got {self.sampling_mode!r}")
        if len(self.conv_channels) != 7:
            raise ConfigError("image encoder uses exactly 7 conv layers")
        if self.no_local and (self.no_patterns or self.no_shift):
            raise ConfigError("no_local removes the entire local pipeline; other ablations conflict")

    @property
    def region_capacity(self) -> int:
        # capacity == patterns * pattern_points keeps the padded-index removal
        # rule a one-to-one row correspondence
        return self.patterns * self.pattern_points

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f.name] = str(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in flat:
                continue
            raw = flat[f.name]
            if f.name == "conv_channels":
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.type.startswith("bool") or isinstance(f.default, bool):
                kwargs[f.name] = raw.lower() in ("1", "true", "yes")
            elif isinstance(f.default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(f.default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


MINI_CONFIG = dict(
    s_points=32,
    f_points=32,
    regions=8,
    patterns=2,
    pattern_points=8,
    image_feat=16,
    region_feat=8,
    image_size=8,
    conv_channels=(4, 4, 8, 8, 8, 8, 8),
)


@dataclass
class PatternBank:
    """Shared base lattice, fixed per-learner offsets, and current pattern outputs."""

    lattice: np.ndarray  # (P, 3)
    offsets: np.ndarray  # (N, 3), not trainable
    layers: list[list[tuple[Parameter, Parameter]]]  # per learner: (weight, bias) triples
    patterns: list[np.ndarray] | None = None  # refreshed every forward pass


@dataclass
class ForwardTrace:
    """Everything a loss or a visualization needs from one forward pass."""

    f_i: np.ndarray  # (1, H)
    s_cloud: np.ndarray  # (S, 3)
    region_set: geo.RegionSet | None
    patterns: list[np.ndarray] | None  # N x (P, 3)
    f_r: np.ndarray | None  # (M, E)
    r_prime: list[np.ndarray] | None  # M x (N*P, 3), object frame
    shifts: list[np.ndarray] | None  # M x (N*P, 3)
    u: list[np.ndarray] | None  # M x (N*P, 3)
    f_cloud: np.ndarray  # final reconstruction
    # tape handles used by the losses (None on tapeless inference)
    s_tensor: DTensor | None = None
    kept_tensors: list[DTensor] | None = None
    f_tensor: DTensor | None = None


def _halton(index: int, base: int) -> float:
    f, r = 1.0, 0.0
    while index > 0:
        f /= base
        r += f * (index % base)
        index //= base
    return r


def learner_offsets(n: int) -> np.ndarray:
    """Deterministic distinct starting translations, one per pattern learner."""
    pts = np.array([[_halton(i + 1, b) for b in (2, 3, 5)] for i in range(n)])
    return (pts - 0.5) * 0.5  # inside [-0.25, 0.25]^3


def make_pattern_learners(config: ModelConfig, rng: np.random.Generator) -> PatternBank:
    """Build N independent 64-256-3 learner MLPs over a shared sampling lattice."""
    lattice = geo.grid_lattice(config.pattern_points, config.pattern_extent, config.sampling_mode)
    offsets = learner_offsets(config.patterns)
    layers = []
    for n in range(config.patterns):
        layers.append(
            [
                _fc_params(f"learner{n}.fc1", 3, 64, rng),
                _fc_params(f"learner{n}.fc2", 64, 256, rng),
                _fc_params(f"learner{n}.fc3", 256, 3, rng),
            ]
        )
    return PatternBank(lattice, offsets, layers)


def _fc_params(prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = Parameter(f"{prefix}.weight", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    b = Parameter(f"{prefix}.bias", np.zeros((1, fan_out)))
    return (w, b)


def _split_fc_params(prefix: str, point_dim: int, feat_dim: int, fan_out: int, rng: np.random.Generator):
    """First layer of a feature-conditioned MLP, stored as the two row blocks
    of the (point_dim + feat_dim) x fan_out matrix it is mathematically."""
    fan_in = point_dim + feat_dim
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    full = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    w_pts = Parameter(f"{prefix}.weight_points", full[:point_dim].copy())
    w_feat = Parameter(f"{prefix}.weight_feature", full[point_dim:].copy())
    b = Parameter(f"{prefix}.bias", np.zeros((1, fan_out)))
    return (w_pts, w_feat, b)


def _conv_params(prefix: str, c_in: int, c_out: int, k: int, rng: np.random.Generator):
    std = np.sqrt(2.0 / (c_in * k * k))
    w = Parameter(f"{prefix}.weight", rng.normal(0.0, std, size=(c_out, c_in, k, k)))
    b = Parameter(f"{prefix}.bias", np.zeros((c_out, 1)))
    return (w, b)


class PatternModel:
    """Holds all parameters and runs the reconstruction pipeline."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config

        self.conv_layers = []
        c_in = c.image_channels
        for i, c_out in enumerate(c.conv_channels):
            self.conv_layers.append(_conv_params(f"encoder.conv{i + 1}", c_in, c_out, _CONV_KERNEL, rng))
            c_in = c_out
        side = c.image_size
        for s in _CONV_STRIDES:
            side = (side + 2 * _CONV_PAD - _CONV_KERNEL) // s + 1
        self._flat_dim = c.conv_channels[-1] * side * side
        self.enc_fc1 = _fc_params("encoder.fc1", self._flat_dim, c.image_feat, rng)
        self.enc_fc2 = _fc_params("encoder.fc2", c.image_feat, c.image_feat, rng)
        self.dec_fc = _fc_params("decoder.fc", c.image_feat, 3 * c.s_points, rng)

        if c.no_local or c.no_patterns:
            self.bank = None
            self.region_fc = None
            self.modularizers = []
        else:
            self.bank = make_pattern_learners(c, rng)
            self.region_fc = _fc_params("region_encoder.fc", 3, c.region_feat, rng)
            self.modularizers = [
                [
                    _split_fc_params(f"modularizer{n}.fc1", 3, c.region_feat, 512, rng),
                    _fc_params(f"modularizer{n}.fc2", 512, 256, rng),
                    _fc_params(f"modularizer{n}.fc3", 256, 128, rng),
                    _fc_params(f"modularizer{n}.fc4", 128, 3, rng),
                ]
                for n in range(c.patterns)
            ]
        if c.no_local:
            self.customizer = []
        else:
            self.customizer = [
                _split_fc_params("customizer.fc1", 3, c.image_feat, 512, rng),
                _fc_params("customizer.fc2", 512, 128, rng),
                _fc_params("customizer.fc3", 128, 3, rng),
            ]

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.conv_layers:
            out += list(layer)
        for layer in (self.enc_fc1, self.enc_fc2, self.dec_fc):
            out += list(layer)
        if self.bank is not None:
            for layer_list in self.bank.layers:
                for layer in layer_list:
                    out += list(layer)
        if self.region_fc is not None:
            out += list(self.region_fc)
        for layer_list in self.modularizers:
            for layer in layer_list:
                out += list(layer)
        for layer in self.customizer:
            out += list(layer)
        names = [p.name for p in out]
        assert len(names) == len(set(names))
        return out

    def param_count(self) -> dict[str, int]:
        """Exact trainable scalar counts per component plus the total."""
        counts: dict[str, int] = {}
        for p in self.parameters():
            component = p.name.split(".")[0]
            for digit in "0123456789":
                component = component.rstrip(digit)
            key = {"learner": "learners", "modularizer": "modularizers"}.get(component, component)
            counts[key] = counts.get(key, 0) + p.data.size
        counts["total"] = sum(v for k, v in counts.items() if k != "total")
        return counts

    # ------------------------------------------------------------------
    # sub-networks; each takes/returns DTensors so it records on the caller's tape

    def _watch_all(self, tape: ad.Tape | None) -> dict[str, DTensor]:
        if tape is None:
            return {p.name: p.tensor for p in self.parameters()}
        return {p.name: tape.watch(p) for p in self.parameters()}

    def encode_image(self, image: np.ndarray, pt: dict[str, DTensor]) -> DTensor:
        c = self.config
        if image.shape != (c.image_channels, c.image_size, c.image_size):
            raise ContractError(
                f"image shape {image.shape} does not match configured "
                f"{(c.image_channels, c.image_size, c.image_size)}"
            )
        x = ad.constant(image)
        side = c.image_size
        for i, stride in enumerate(_CONV_STRIDES):
            w = pt[f"encoder.conv{i + 1}.weight"]
            b = pt[f"encoder.conv{i + 1}.bias"]
            x = ad.conv2d(x, w, stride=stride, pad=_CONV_PAD)
            side = (side + 2 * _CONV_PAD - _CONV_KERNEL) // stride + 1
            ch = x.shape[0]
            x = ad.relu(ad.add(ad.reshape(x, (ch, -1)), b))
            x = ad.reshape(x, (ch, side, side))
        flat = ad.reshape(x, (1, self._flat_dim))
        h = _linear(flat, pt, "encoder.fc1", "relu")
        return _linear(h, pt, "encoder.fc2")

    def decode_shape(self, f_i: DTensor, pt: dict[str, DTensor]) -> DTensor:
        coords = _linear(f_i, pt, "decoder.fc", "tanh")
        return ad.reshape(coords, (self.config.s_points, 3))

    def compute_patterns(self, pt: dict[str, DTensor]) -> list[DTensor]:
        assert self.bank is not None
        outs = []
        for n in range(self.config.patterns):
            x = ad.constant(self.bank.lattice + self.bank.offsets[n])
            h = _linear(x, pt, f"learner{n}.fc1", "relu")
            h = _linear(h, pt, f"learner{n}.fc2", "relu")
            outs.append(_linear(h, pt, f"learner{n}.fc3", "tanh"))
        return outs

    def encode_region(self, centered_points: DTensor, pt: dict[str, DTensor]) -> DTensor:
        """Pointwise FC + ReLU then max-pool over the (real) rows -> 1 x E."""
        h = _linear(centered_points, pt, "region_encoder.fc", "relu")
        return ad.max_over_columns(h)

    def modularize_stacked(
        self, f_r_all: DTensor, patterns: list[DTensor], pt: dict[str, DTensor]
    ) -> list[DTensor]:
        """Decode every pattern against all M region features at once.

        Returns one (M*P, 3) tensor per pattern, region-major, local frame.
        """
        m = f_r_all.shape[0]
        p_rows = self.config.pattern_points
        outs = []
        for n, pattern in enumerate(patterns):
            x = ad.concat([pattern] * m, axis=0) if m > 1 else pattern
            h = ad.linear_blockfeat(
                x,
                f_r_all,
                pt[f"modularizer{n}.fc1.weight_points"],
                pt[f"modularizer{n}.fc1.weight_feature"],
                pt[f"modularizer{n}.fc1.bias"],
                block_rows=p_rows,
                activation="relu",
            )
            h = _linear(h, pt, f"modularizer{n}.fc2", "relu")
            h = _linear(h, pt, f"modularizer{n}.fc3", "relu")
            outs.append(_linear(h, pt, f"modularizer{n}.fc4", "tanh"))
        return outs

    def modularize(
        self, f_r: DTensor, patterns: list[DTensor], pt: dict[str, DTensor]
    ) -> DTensor:
        """Modularize a single region: N pattern blocks concatenated -> (N*P, 3)."""
        return ad.concat(self.modularize_stacked(f_r, patterns, pt), axis=0)

    def customize(self, r_prime_obj: DTensor, f_i: DTensor, pt: dict[str, DTensor]) -> DTensor:
        """Predict the per-point modularization shift from the image feature."""
        row = ad.linear(f_i, pt["customizer.fc1.weight_feature"], pt["customizer.fc1.bias"])
        h = ad.linear(r_prime_obj, pt["customizer.fc1.weight_points"], row, activation="relu")
        h = _linear(h, pt, "customizer.fc2", "relu")
        return _linear(h, pt, "customizer.fc3", "tanh")

    # ------------------------------------------------------------------
    # full pipeline

    def forward(
        self,
        image: np.ndarray,
        reference: np.ndarray | None = None,
        tape: ad.Tape | None = None,
    ) -> ForwardTrace:
        """Run the pipeline; ``reference`` drives the region split when given
        (training mode), otherwise the initial prediction splits itself."""
        pt = self._watch_all(tape)
        f_i = self.encode_image(np.asarray(image, dtype=np.float64), pt)
        return self._pipeline_from_code(f_i, reference, pt)

    def forward_from_code(self, code: np.ndarray, reference: np.ndarray | None = None) -> ForwardTrace:
        """Run the pipeline from an image feature directly (latent interpolation)."""
        pt = self._watch_all(None)
        return self._pipeline_from_code(ad.constant(code.reshape(1, -1)), reference, pt)

    def _pipeline_from_code(
        self, f_i: DTensor, reference: np.ndarray | None, pt: dict[str, DTensor]
    ) -> ForwardTrace:
        c = self.config
        _check_finite(f_i.data, "image feature")
        s_tensor = self.decode_shape(f_i, pt)
        s_cloud = s_tensor.data
        _check_finite(s_cloud, "initial prediction")

        if c.no_local:
            return ForwardTrace(
                f_i=f_i.data, s_cloud=s_cloud, region_set=None, patterns=None,
                f_r=None, r_prime=None, shifts=None, u=None, f_cloud=s_cloud,
                s_tensor=s_tensor, kept_tensors=None, f_tensor=s_tensor,
            )

        split_ref = s_cloud if reference is None else geo.as_cloud(reference)
        region_set = geo.split_regions(s_cloud, split_ref, c.regions, c.region_capacity)
        if all(r.is_empty for r in region_set.regions):
            raise ContractError("degenerate initial prediction: every region is empty")

        patterns = None
        if not c.no_patterns:
            patterns = self.compute_patterns(pt)
            for p in patterns:
                _check_finite(p.data, "pattern")

        rows_per_region = c.region_capacity
        f_r_rows, r_prime_obj = [], []
        if c.no_patterns:
            # customizer consumes the padded region points directly
            for region in region_set.regions:
                k = region.real_count
                if k == rows_per_region:
                    r_prime_obj.append(ad.gather_rows(s_tensor, region.source_rows))
                elif k:
                    real = ad.gather_rows(s_tensor, region.source_rows)
                    pad = ad.constant(np.zeros((rows_per_region - k, 3)))
                    r_prime_obj.append(ad.concat([real, pad], axis=0))
                else:
                    r_prime_obj.append(ad.constant(np.zeros((rows_per_region, 3))))
        else:
            f_r_items, center_items = [], []
            for region in region_set.regions:
                if region.real_count:
                    real = ad.gather_rows(s_tensor, region.source_rows)
                    center = ad.reshape(ad.reduce_mean(real, axis=0), (1, 3))
                    centered = ad.sub(real, center)
                    f_r = self.encode_region(centered, pt)
                else:
                    center = ad.constant(np.zeros((1, 3)))
                    f_r = ad.constant(np.zeros((1, c.region_feat)))
                f_r_items.append(f_r)
                center_items.append(center)
            f_r_all = ad.concat(f_r_items, axis=0)
            per_pattern = self.modularize_stacked(f_r_all, patterns, pt)
            p_rows = c.pattern_points
            for m in range(c.regions):
                parts = [
                    ad.gather_rows(out_n, np.arange(m * p_rows, (m + 1) * p_rows))
                    for out_n in per_pattern
                ]
                local = ad.concat(parts, axis=0)  # (N*P, 3) in the local frame
                r_prime_obj.append(ad.add(local, center_items[m]))
                f_r_rows.append(f_r_items[m].data)

        for r in r_prime_obj:
            _check_finite(r.data, "modularized region")

        stacked = ad.concat(r_prime_obj, axis=0)
        if c.no_shift:
            u_stacked = stacked
        else:
            shifts_t = self.customize(stacked, f_i, pt)
            u_stacked = ad.add(stacked, shifts_t)
        _check_finite(u_stacked.data, "customized region")
        # realized residual: identical to the predicted shift up to the final
        # rounding of the addition, and exactly U - R' by construction
        shift_np = u_stacked.data - stacked.data

        kept_tensors: list[DTensor | None] = []
        r_prime_np, shift_list, u_np = [], [], []
        for m, region in enumerate(region_set.regions):
            lo = m * rows_per_region
            hi = lo + rows_per_region
            r_prime_np.append(stacked.data[lo:hi])
            shift_list.append(shift_np[lo:hi])
            u_np.append(u_stacked.data[lo:hi])
            k = region.real_count
            kept_tensors.append(ad.gather_rows(u_stacked, np.arange(lo, lo + k)) if k else None)
        nonempty = [t for t in kept_tensors if t is not None]
        f_tensor = ad.concat(nonempty, axis=0) if len(nonempty) > 1 else nonempty[0]
        f_cloud = f_tensor.data
        _check_finite(f_cloud, "final reconstruction")

        return ForwardTrace(
            f_i=f_i.data,
            s_cloud=s_cloud,
            region_set=region_set,
            patterns=[p.data for p in patterns] if patterns else None,
            f_r=np.vstack(f_r_rows) if f_r_rows else None,
            r_prime=r_prime_np,
            shifts=shift_list,
            u=u_np,
            f_cloud=f_cloud,
            s_tensor=s_tensor,
            kept_tensors=kept_tensors,
            f_tensor=f_tensor,
        )

    def reconstruct(self, image: np.ndarray) -> ForwardTrace:
        """Inference: the region split reads only the model's own prediction."""
        return self.forward(image, reference=None, tape=None)


def assemble_final(u_regions: list[np.ndarray], masks: list[np.ndarray], target: int | None = None) -> np.ndarray:
    """Keep rows whose region slot held a real point; optionally resample to target."""
    kept = [u[: int(m.sum())] for u, m in zip(u_regions, masks) if m.any()]
    if not kept:
        raise ContractError("degenerate reconstruction: every region is empty")
    cloud = np.vstack(kept)
    if target is not None and cloud.shape[0] > target:
        cloud = geo.downsample(cloud, target, "fps")
    return cloud


def _linear(x: DTensor, pt: dict[str, DTensor], prefix: str, activation: str | None = None) -> DTensor:
    return ad.linear(x, pt[f"{prefix}.weight"], pt[f"{prefix}.bias"], activation)


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalAbort(f"non-finite values in {stage}")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: PatternModel, extra_config: dict[str, str] | None = None) -> None:
    """Write magic, version, flat config block, then raw little-endian parameters."""
    flat = dict(model.config.to_flat())
    if extra_config:
        flat.update(extra_config)
    config_blob = "\n".join(f"{k}={v}" for k, v in sorted(flat.items())).encode()
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<B", p.data.ndim))
        for dim in p.data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[PatternModel, dict[str, str]]:
    """Rebuild the model from a checkpoint; returns it with the stored flat config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", view, 6)
    offset = 10
    flat = {}
    for line in bytes(view[offset : offset + cfg_len]).decode().splitlines():
        key, _, value = line.partition("=")
        flat[key] = value
    offset += cfg_len
    config = ModelConfig.from_flat(flat)
    model = PatternModel(config, seed=0)
    (n_params,) = struct.unpack_from("<I", view, offset)
    offset += 4
    by_name = {p.name: p for p in model.parameters()}
    if n_params != len(by_name):
        raise ContractError(f"{path}: checkpoint has {n_params} parameters, model has {len(by_name)}")
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset : offset + name_len]).decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", view, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", view, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(view, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        if name not in by_name:
            raise ContractError(f"{path}: unknown parameter {name!r}")
        param = by_name[name]
        if param.data.shape != tuple(shape):
            raise ContractError(
                f"{path}: shape mismatch for {name!r}: checkpoint {tuple(shape)} vs model {param.data.shape}"
            )
        param.data = values.copy()
    return model, flat
