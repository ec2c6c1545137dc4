"""The six networks of the generative model and their composition.

Generator = encoder (anatomy -> bounded latent z) + condition mapper
(age/sex one-hots -> condition latent z_c) + decoder (z ++ z_c -> soft
one-hot anatomy pair).  Training additionally uses an age predictor on
anatomies, a latent discriminator on z, and a conditional image
discriminator on (anatomy, age-vector) pairs.

ED and ES frames travel together as 2*L stacked channels, so one generator
models both cardiac phases jointly.  Grids must have power-of-two dims of at
most 32 so that five stride-2 stages reach 1x1x1; axes that collapse early
switch to unit kernels for the remaining stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .conditioning import AgeBins, age_vector, bin_age, sex_vector
from .voxelgrid import AnatomyPair, LabelVolume, OneHotVolume, onehot_encode

_ALLOWED_DIMS = (2, 4, 8, 16, 32)
N_STAGES = 5


@dataclass(frozen=True)
class ModelConfig:
    grid: tuple[int, int, int] = (32, 32, 16)
    n_labels: int = 4
    n_age_bins: int = 7
    n_z: int = 32
    n_c: int = 32
    enc_widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    dec_widths: tuple[int, int, int, int] = (64, 32, 16, 8)
    cond_hidden: int = 64
    cond_layers: int = 3
    pred_widths: tuple[int, ...] = (8, 16, 32, 64, 64, 64)
    disc_widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    dz_hidden: tuple[int, int] = (64, 64)
    dtype: str = "float32"

    def __post_init__(self):
        if any(d not in _ALLOWED_DIMS for d in self.grid):
            raise ValueError(
                f"grid dims must be powers of two in {_ALLOWED_DIMS}, got {self.grid}"
            )
        if len(self.enc_widths) != N_STAGES - 1 or len(self.dec_widths) != N_STAGES - 1:
            raise ValueError("enc_widths/dec_widths must list 4 layer widths")
        if len(self.pred_widths) != 6:
            raise ValueError("pred_widths must list 6 conv widths")

    @property
    def in_channels(self) -> int:
        return 2 * self.n_labels

    @property
    def cond_dim(self) -> int:
        return self.n_age_bins + 2

    @classmethod
    def micro(cls) -> "ModelConfig":
        """Tiny 4x4x4 configuration used by gradient checks and fast tests."""
        return cls(
            grid=(4, 4, 4),
            n_z=6,
            n_c=6,
            enc_widths=(3, 4, 5, 6),
            dec_widths=(8, 6, 5, 4),
            cond_hidden=8,
            pred_widths=(3, 4, 4, 4, 4, 4),
            disc_widths=(3, 4, 4, 4),
            dz_hidden=(8, 8),
            dtype="float64",
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = dict(d)
        for key in (
            "grid",
            "enc_widths",
            "dec_widths",
            "pred_widths",
            "disc_widths",
            "dz_hidden",
        ):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def encoder_plan(grid) -> list[tuple[tuple, tuple, tuple, tuple]]:
    """Five stride-2 stages of (kernel, stride, padding, out_spatial) per axis.

    An axis of size >= 2 halves with kernel 4 / stride 2 / padding 1; an axis
    already at size 1 uses a degenerate unit kernel.
    """
    plans = []
    cur = tuple(grid)
    for _ in range(N_STAGES):
        k, s, p, nxt = [], [], [], []
        for d in cur:
            if d >= 2:
                k.append(4), s.append(2), p.append(1), nxt.append(d // 2)
            else:
                k.append(1), s.append(1), p.append(0), nxt.append(1)
        plans.append((tuple(k), tuple(s), tuple(p), tuple(nxt)))
        cur = tuple(nxt)
    if cur != (1, 1, 1):
        raise ValueError(f"grid {grid} does not reduce to 1x1x1 in {N_STAGES} stages")
    return plans


def decoder_plan(grid):
    """Mirror of the encoder plan: spatial sizes doubling back to the grid."""
    sizes = [tuple(grid)] + [plan[3] for plan in encoder_plan(grid)]
    plans = []
    for j in range(N_STAGES):
        cur, nxt = sizes[N_STAGES - j], sizes[N_STAGES - j - 1]
        k, s, p = [], [], []
        for c, n in zip(cur, nxt):
            if n == 2 * c:
                k.append(4), s.append(2), p.append(1)
            elif n == c:
                k.append(1), s.append(1), p.append(0)
            else:
                raise ValueError(f"cannot grow axis {c} -> {n}")
        plans.append((tuple(k), tuple(s), tuple(p), nxt))
    return plans


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Net:
    """Common plumbing: parameters registered under a prefix in one store."""

    def __init__(self, prefix: str, store: dc.ParamStore):
        self.prefix = prefix
        self.store = store
        self._names: list[str] = []

    def _add(self, name, data):
        full = f"{self.prefix}.{name}"
        self._names.append(full)
        return self.store.add(full, data)

    def _param(self, tensor: dc.Tensor, frozen: bool) -> dc.Tensor:
        return tensor.detach() if frozen else tensor

    def n_parameters(self) -> int:
        return sum(self.store[n].tensor.data.size for n in self._names)


class _ConvStack(_Net):
    """Shared conv pyramid builder for the encoder-like networks."""

    def _add_conv(self, idx, cin, cout, kernel, rng, dtype, transposed=False):
        if transposed:
            shape = (cin, cout) + tuple(kernel)
        else:
            shape = (cout, cin) + tuple(kernel)
        fan_in = cin * int(np.prod(kernel))
        w = self._add(f"c{idx}.w", _uniform(rng, shape, fan_in, dtype))
        b = self._add(f"c{idx}.b", _uniform(rng, (cout,), fan_in, dtype))
        return w, b


class Encoder(_ConvStack):
    """Five 3D conv layers then a flatten; output bounded to [-1, 1] by tanh."""

    def __init__(self, cfg: ModelConfig, store, rng, dtype):
        super().__init__("enc", store)
        self.plans = encoder_plan(cfg.grid)
        self.n_z = cfg.n_z
        widths = (cfg.in_channels,) + cfg.enc_widths + (cfg.n_z,)
        self.layers = []
        for i, (k, s, p, _) in enumerate(self.plans):
            w, b = self._add_conv(i, widths[i], widths[i + 1], k, rng, dtype)
            self.layers.append((w, b, s, p))

    def forward(self, x: dc.Tensor, frozen: bool = False) -> dc.Tensor:
        h = x
        for i, (w, b, s, p) in enumerate(self.layers):
            h = dc.conv3d(h, self._param(w, frozen), self._param(b, frozen), s, p)
            if i < len(self.layers) - 1:
                h = dc.relu(h)
        h = dc.reshape(h, (h.shape[0], self.n_z))
        return dc.tanh(h)


class Decoder(_ConvStack):
    """Unflatten then five transposed-conv layers; channel softmax per frame."""

    def __init__(self, cfg: ModelConfig, store, rng, dtype):
        super().__init__("dec", store)
        self.cfg = cfg
        self.plans = decoder_plan(cfg.grid)
        widths = (cfg.n_z + cfg.n_c,) + cfg.dec_widths + (cfg.in_channels,)
        self.layers = []
        for i, (k, s, p, _) in enumerate(self.plans):
            w, b = self._add_conv(i, widths[i], widths[i + 1], k, rng, dtype, transposed=True)
            self.layers.append((w, b, s, p))

    def forward(self, z: dc.Tensor, z_c: dc.Tensor, frozen: bool = False) -> dc.Tensor:
        h = dc.concat([z, z_c], axis=1)
        h = dc.reshape(h, (h.shape[0], h.shape[1], 1, 1, 1))
        for i, (w, b, s, p) in enumerate(self.layers):
            h = dc.tconv3d(h, self._param(w, frozen), self._param(b, frozen), s, p)
            if i < len(self.layers) - 1:
                h = dc.relu(h)
        b_, _, x_, y_, z_ = h.shape
        h = dc.reshape(h, (b_, 2, self.cfg.n_labels, x_, y_, z_))
        h = dc.softmax(h, axis=2)
        return dc.reshape(h, (b_, 2 * self.cfg.n_labels, x_, y_, z_))


class ConditionMapper(_Net):
    """MLP embedding the (age, sex) condition into the condition latent."""

    def __init__(self, cfg: ModelConfig, store, rng, dtype):
        super().__init__("map", store)
        widths = (cfg.cond_dim,) + (cfg.cond_hidden,) * cfg.cond_layers + (cfg.n_c,)
        self.layers = []
        for i in range(len(widths) - 1):
            w = self._add(f"fc{i}.w", _uniform(rng, (widths[i], widths[i + 1]), widths[i], dtype))
            b = self._add(f"fc{i}.b", _uniform(rng, (widths[i + 1],), widths[i], dtype))
            self.layers.append((w, b))

    def forward(self, c: dc.Tensor, frozen: bool = False) -> dc.Tensor:
        h = c
        for i, (w, b) in enumerate(self.layers):
            h = dc.bias_add(dc.matmul(h, self._param(w, frozen)), self._param(b, frozen))
            if i < len(self.layers) - 1:
                h = dc.relu(h)
        return h


class AgePredictor(_ConvStack):
    """Six 3D conv layers plus a fully connected head producing age-bin logits."""

    def __init__(self, cfg: ModelConfig, store, rng, dtype):
        super().__init__("pred", store)
        plans = encoder_plan(cfg.grid) + [((1, 1, 1), (1, 1, 1), (0, 0, 0), (1, 1, 1))]
        widths = (cfg.in_channels,) + cfg.pred_widths
        self.layers = []
        for i, (k, s, p, _) in enumerate(plans):
            w, b = self._add_conv(i, widths[i], widths[i + 1], k, rng, dtype)
            self.layers.append((w, b, s, p))
        self.fc_w = self._add("fc.w", _uniform(rng, (widths[-1], cfg.n_age_bins), widths[-1], dtype))
        self.fc_b = self._add("fc.b", _uniform(rng, (cfg.n_age_bins,), widths[-1], dtype))
        self.out_width = widths[-1]

    def forward(self, x: dc.Tensor, frozen: bool = False) -> dc.Tensor:
        h = x
        for w, b, s, p in self.layers:
            h = dc.conv3d(h, self._param(w, frozen), self._param(b, frozen), s, p)
            h = dc.relu(h)
        h = dc.reshape(h, (h.shape[0], self.out_width))
        return dc.bias_add(
            dc.matmul(h, self._param(self.fc_w, frozen)), self._param(self.fc_b, frozen)
        )


class LatentDiscriminator(_Net):
    """MLP scoring whether a latent code looks like a uniform prior sample."""

    def __init__(self, cfg: ModelConfig, store, rng, dtype):
        super().__init__("dz", store)
        widths = (cfg.n_z,) + cfg.dz_hidden + (1,)
        self.layers = []
        for i in range(len(widths) - 1):
            w = self._add(f"fc{i}.w", _uniform(rng, (widths[i], widths[i + 1]), widths[i], dtype))
            b = self._add(f"fc{i}.b", _uniform(rng, (widths[i + 1],), widths[i], dtype))
            self.layers.append((w, b))

    def logit(self, z: dc.Tensor, frozen: bool = False) -> dc.Tensor:
        h = z
        for i, (w, b) in enumerate(self.layers):
            h = dc.bias_add(dc.matmul(h, self._param(w, frozen)), self._param(b, frozen))
            if i < len(self.layers) - 1:
                h = dc.relu(h)
        return dc.reshape(h, (h.shape[0],))


class ImageDiscriminator(_ConvStack):
    """Conditional discriminator on anatomy channels plus broadcast age channels."""

    def __init__(self, cfg: ModelConfig, store, rng, dtype):
        super().__init__("dimg", store)
        self.grid = cfg.grid
        plans = encoder_plan(cfg.grid)
        widths = (cfg.in_channels + cfg.n_age_bins,) + cfg.disc_widths + (1,)
        self.layers = []
        for i, (k, s, p, _) in enumerate(plans):
            w, b = self._add_conv(i, widths[i], widths[i + 1], k, rng, dtype)
            self.layers.append((w, b, s, p))

    def logit(self, x: dc.Tensor, age_vec: dc.Tensor, frozen: bool = False) -> dc.Tensor:
        return self.logit_recording(x, age_vec, frozen)[0]

    def logit_recording(self, x: dc.Tensor, age_vec: dc.Tensor, frozen: bool = False):
        """Logits plus the per-layer pre-activation values (for replay)."""
        cond = dc.broadcast_spatial(age_vec, self.grid)
        h = dc.concat([x, cond], axis=1)
        cached = []
        for i, (w, b, s, p) in enumerate(self.layers):
            h = dc.conv3d(h, self._param(w, frozen), self._param(b, frozen), s, p)
            cached.append(h.data)
            if i < len(self.layers) - 1:
                h = dc.relu(h)
        return dc.reshape(h, (h.shape[0],)), cached

    def logit_replay(self, x: dc.Tensor, age_vec: dc.Tensor, cached) -> dc.Tensor:
        """Frozen-weight graph over live inputs, reusing recorded forward values.

        ``cached`` must hold this input's pre-activation values per layer
        (rows of a previous :meth:`logit_recording` call on the same values);
        only input gradients are produced, the forward costs nothing.
        """
        cond = dc.broadcast_spatial(age_vec, self.grid)
        h = dc.concat([x, cond], axis=1)
        for i, (w, _, s, p) in enumerate(self.layers):
            h = dc.conv3d_replay(h, w, cached[i], s, p)
            if i < len(self.layers) - 1:
                h = dc.relu(h)
        return dc.reshape(h, (h.shape[0],))


class SynthesisModel:
    """The six networks plus their parameter stores, grouped for training.

    Groups: ``gen`` (encoder, decoder, condition mapper), ``adv`` (latent and
    image discriminators), ``pred`` (age predictor).  Construction order and
    the seed fully determine the initial parameters.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.np_dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.gen_store = dc.ParamStore()
        self.adv_store = dc.ParamStore()
        self.pred_store = dc.ParamStore()
        self.encoder = Encoder(cfg, self.gen_store, rng, self.np_dtype)
        self.decoder = Decoder(cfg, self.gen_store, rng, self.np_dtype)
        self.mapper = ConditionMapper(cfg, self.gen_store, rng, self.np_dtype)
        self.dz = LatentDiscriminator(cfg, self.adv_store, rng, self.np_dtype)
        self.dimg = ImageDiscriminator(cfg, self.adv_store, rng, self.np_dtype)
        self.predictor = AgePredictor(cfg, self.pred_store, rng, self.np_dtype)

    @property
    def stores(self) -> dict[str, dc.ParamStore]:
        return {"gen": self.gen_store, "adv": self.adv_store, "pred": self.pred_store}

    def parameter_counts(self) -> dict[str, int]:
        return {
            "encoder": self.encoder.n_parameters(),
            "decoder": self.decoder.n_parameters(),
            "mapper": self.mapper.n_parameters(),
            "dz": self.dz.n_parameters(),
            "dimg": self.dimg.n_parameters(),
            "predictor": self.predictor.n_parameters(),
        }

    # ---- numpy-level inference API -------------------------------------

    def _const(self, arr, expect_ndim: int) -> dc.Tensor:
        arr = np.asarray(arr, dtype=self.np_dtype)
        if arr.ndim == expect_ndim - 1:
            arr = arr[None]
        if arr.ndim != expect_ndim:
            raise ValueError(f"expected {expect_ndim}D (batched) input, got {arr.shape}")
        return dc.Tensor(arr)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Latent codes for stacked one-hot pairs (B, 2L, X, Y, Z)."""
        return self.encoder.forward(self._const(x, 5)).data

    def map_condition(self, cond: np.ndarray) -> np.ndarray:
        return self.mapper.forward(self._const(cond, 2)).data

    def decode(self, z: np.ndarray, z_c: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self._const(z, 2), self._const(z_c, 2)).data

    def generate_batch(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Soft one-hot pairs synthesised at the given conditions."""
        xt = self._const(x, 5)
        ct = self._const(cond, 2)
        z = self.encoder.forward(xt)
        z_c = self.mapper.forward(ct)
        return self.decoder.forward(z, z_c).data

    def generate(
        self,
        pair: AnatomyPair,
        age_target: float,
        sex: str,
        bins: AgeBins | None = None,
        sigma: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> tuple[OneHotVolume, OneHotVolume]:
        """Counterfactual synthesis of one anatomy pair at a target age."""
        bins = bins or AgeBins()
        cond = np.concatenate(
            [
                age_vector(bin_age(age_target, bins), bins.n_bins, sigma, rng),
                sex_vector(sex),
            ]
        )
        y = self.generate_batch(pair_to_channels(pair)[None], cond[None])[0]
        return channels_to_soft_volumes(y, pair.ed.spacing)

    def predict_age_batch(self, x: np.ndarray) -> np.ndarray:
        return self.predictor.forward(self._const(x, 5)).data

    def disc_latent(self, z: np.ndarray) -> np.ndarray:
        return dc.sigmoid(self.dz.logit(self._const(z, 2))).data

    def disc_image(self, x: np.ndarray, age_vec: np.ndarray) -> np.ndarray:
        return dc.sigmoid(
            self.dimg.logit(self._const(x, 5), self._const(age_vec, 2))
        ).data


# ---------------------------------------------------------------------------
# Channel packing helpers (ED one-hot block then ES one-hot block)
# ---------------------------------------------------------------------------


def pair_to_channels(pair: AnatomyPair) -> np.ndarray:
    """Stack the hard one-hot maps of both frames into (2L, X, Y, Z) float32."""
    return np.concatenate(
        [onehot_encode(pair.ed).channels, onehot_encode(pair.es).channels]
    ).astype(np.float32)


def channels_to_soft_volumes(row: np.ndarray, spacing) -> tuple[OneHotVolume, OneHotVolume]:
    half = row.shape[0] // 2
    return (
        OneHotVolume(channels=row[:half].copy(), spacing=spacing),
        OneHotVolume(channels=row[half:].copy(), spacing=spacing),
    )


def channels_to_pair(row: np.ndarray, spacing) -> AnatomyPair:
    """Harden generator output channels back to a label-volume pair."""
    half = row.shape[0] // 2
    ed = np.argmax(row[:half], axis=0).astype(np.uint8)
    es = np.argmax(row[half:], axis=0).astype(np.uint8)
    return AnatomyPair(
        ed=LabelVolume(labels=ed, spacing=spacing, n_labels=half),
        es=LabelVolume(labels=es, spacing=spacing, n_labels=half),
    )
