"""3D ViT encoder with a UNETR-style decoder and learnable prompt tokens.

Volumes are laid out ``(channels, X, Y, Z)``. Patch tokens are ordered
row-major over the ``(X/K, Y/K, Z/K)`` patch grid (X slowest, Z fastest)
and each patch is flattened channel-major, then ``(kx, ky, kz)``.

Prompt rows are prepended after the positional embedding has been added
to the patch tokens, so no positional row ever touches a prompt. Only the
trailing ``n`` patch rows of an encoder state are handed to the decoder.

Decoder layout (one stage per skip layer, deepest first)::

    h = tokens(L)
    for stage t = 1..T:
        h = gelu(convT(h, stride f_t))
        if t < T:  concat with the next shallower skip, lifted by t convT steps
        else:      concat with gelu(conv3(x)) computed on the raw input
        h = gelu(conv3(concat))
    logits = conv1(h)

``f_t`` is 1 for the first ``T - log2(K)`` stages and 2 afterwards, so the
final stage lands at full resolution. With K=16 and four skips this is the
original UNETR schedule.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError

PROMPT_MODES = ("none", "shallow", "deep")


@dataclass(frozen=True)
class ModelConfig:
    volume_shape: tuple = (16, 16, 16)
    in_channels: int = 2
    patch_size: int = 4
    embed_dim: int = 192
    depth: int = 12
    num_heads: int = 6
    mlp_dim: int = 768
    num_classes: int = 3
    skip_layers: tuple = (3, 6, 9, 12)
    decoder_channels: tuple = (64, 32, 16, 8)
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(v) for v in self.volume_shape))
        object.__setattr__(self, "skip_layers", tuple(int(v) for v in self.skip_layers))
        object.__setattr__(self, "decoder_channels", tuple(int(v) for v in self.decoder_channels))
        self.validate()

    def validate(self):
        k = self.patch_size
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise ConfigError(f"volume_shape must be three positive extents, got {self.volume_shape}")
        if k < 1 or k & (k - 1):
            raise ConfigError(f"patch_size must be a power of two, got {k}")
        if any(v % k for v in self.volume_shape):
            raise ConfigError(f"volume extents {self.volume_shape} are not divisible by patch size {k}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        skips = self.skip_layers
        if not skips or list(skips) != sorted(set(skips)) or skips[0] < 1 or skips[-1] != self.depth:
            raise ConfigError(f"skip_layers {skips} must be sorted, unique, within 1..{self.depth}, ending at {self.depth}")
        if len(self.decoder_channels) != len(skips):
            raise ConfigError("decoder_channels needs one entry per skip layer")
        if self.num_upsamples > len(skips):
            raise ConfigError(f"patch size {k} needs {self.num_upsamples} doublings but only {len(skips)} decoder stages exist")
        if self.in_channels < 1 or self.num_classes < 2 or min(self.decoder_channels) < 1:
            raise ConfigError("channel counts must be positive and num_classes >= 2")

    @property
    def grid(self):
        return tuple(v // self.patch_size for v in self.volume_shape)

    @property
    def num_tokens(self):
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size**3

    @property
    def num_upsamples(self):
        return int(round(math.log2(self.patch_size)))

    @property
    def stage_factors(self):
        t, u = len(self.skip_layers), self.num_upsamples
        return (1,) * (t - u) + (2,) * u

    def default_deep_sites(self):
        """Layer 1 plus the layer right after every non-final skip export."""
        return (1,) + tuple(s + 1 for s in self.skip_layers[:-1])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def toy(cls, **overrides):
        base = dict(
            volume_shape=(16, 16, 16),
            patch_size=4,
            embed_dim=32,
            depth=4,
            num_heads=4,
            mlp_dim=64,
            skip_layers=(2, 4),
            decoder_channels=(16, 8),
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class PromptConfig:
    mode: str = "none"
    num_prompts: int = 0
    sites: tuple = ()
    init_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))
        if self.mode not in PROMPT_MODES:
            raise ConfigError(f"prompt mode must be one of {PROMPT_MODES}, got {self.mode!r}")
        if self.num_prompts < 0:
            raise ConfigError("num_prompts must be >= 0")
        if self.mode == "none" and (self.num_prompts or self.sites):
            raise ConfigError("mode 'none' takes no prompts and no sites")
        if self.mode == "shallow" and self.sites != (1,):
            raise ConfigError("shallow prompts live at site (1,) only")
        if self.mode == "deep" and (not self.sites or list(self.sites) != sorted(set(self.sites)) or self.sites[0] < 1):
            raise ConfigError(f"deep prompt sites must be sorted, unique and >= 1, got {self.sites}")
        if self.init_scale is not None and self.init_scale < 0:
            raise ConfigError("init_scale must be non-negative")

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def shallow(cls, num_prompts=50, init_scale=None):
        return cls("shallow", num_prompts, (1,), init_scale)

    @classmethod
    def deep(cls, num_prompts=50, sites=(1, 4, 7, 10), init_scale=None):
        return cls("deep", num_prompts, tuple(sites), init_scale)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_prompt_scale(config):
    """Xavier-style half-width tied to the patch projection: sqrt(6 / (K^3 C + d))."""
    return math.sqrt(6.0 / (config.patch_dim + config.embed_dim))


def architecture_fingerprint(config, prompt_config):
    payload = json.dumps({"model": config.to_dict(), "prompt": prompt_config.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _xavier(rng, shape, fan_in, fan_out, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class SegModel:
    """Parameter registry plus architecture for the prompt-tunable segmenter.

    ``params`` maps dotted names to leaf tensors in a fixed build order.
    Backbone weights come from ``seed``; prompts from an independent stream
    so attaching prompts never perturbs the backbone initialisation.
    """

    def __init__(self, config=None, prompt_config=None, seed=0, dtype=None):
        self.config = config or ModelConfig()
        self.prompt_config = prompt_config or PromptConfig()
        self.seed = seed
        self.dtype = np.dtype(dtype or ag.get_default_dtype()).type
        self._check_sites()
        self.params = {}
        self._build_backbone(np.random.default_rng(seed))
        self._build_prompts(np.random.default_rng([seed, 0x9E3779B9]))

    # -- construction -----------------------------------------------------

    def _check_sites(self):
        bad = [s for s in self.prompt_config.sites if s > self.config.depth]
        if bad:
            raise ConfigError(f"prompt sites {bad} exceed encoder depth {self.config.depth}")

    def _add(self, name, array):
        self.params[name] = Tensor(array, dtype=self.dtype, name=name)

    def _build_backbone(self, rng):
        c, dt = self.config, self.dtype
        d, m = c.embed_dim, c.mlp_dim
        self._add("embed.proj.weight", _xavier(rng, (c.patch_dim, d), c.patch_dim, d, dt))
        self._add("embed.proj.bias", np.zeros(d))
        self._add("embed.pos", (0.02 * rng.standard_normal((c.num_tokens, d))).astype(dt))
        for i in range(1, c.depth + 1):
            p = f"encoder.{i}."
            self._add(p + "ln1.gamma", np.ones(d))
            self._add(p + "ln1.beta", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                self._add(p + f"attn.w{proj}", _xavier(rng, (d, d), d, d, dt))
                self._add(p + f"attn.b{proj}", np.zeros(d))
            self._add(p + "ln2.gamma", np.ones(d))
            self._add(p + "ln2.beta", np.zeros(d))
            self._add(p + "mlp.w1", _xavier(rng, (d, m), d, m, dt))
            self._add(p + "mlp.b1", np.zeros(m))
            self._add(p + "mlp.w2", _xavier(rng, (m, d), m, d, dt))
            self._add(p + "mlp.b2", np.zeros(d))

        chans, factors, stages = c.decoder_channels, c.stage_factors, len(c.skip_layers)
        for t in range(1, stages + 1):
            p = f"decoder.stage{t}."
            cout, f = chans[t - 1], factors[t - 1]
            cin = d if t == 1 else chans[t - 2]
            self._add(p + "up.weight", _xavier(rng, (cin, cout, f, f, f), cin, cout, dt))
            self._add(p + "up.bias", np.zeros(cout))
            if t < stages:
                for j in range(1, t + 1):
                    fj, sin = factors[j - 1], (d if j == 1 else cout)
                    self._add(p + f"skip{j}.weight", _xavier(rng, (sin, cout, fj, fj, fj), sin, cout, dt))
                    self._add(p + f"skip{j}.bias", np.zeros(cout))
            else:
                cin_x = c.in_channels
                self._add("decoder.input.weight", _xavier(rng, (cout, cin_x, 3, 3, 3), cin_x * 27, cout * 27, dt))
                self._add("decoder.input.bias", np.zeros(cout))
            self._add(p + "block.weight", _xavier(rng, (cout, 2 * cout, 3, 3, 3), 2 * cout * 27, cout * 27, dt))
            self._add(p + "block.bias", np.zeros(cout))
        last = chans[-1]
        self._add("head.weight", _xavier(rng, (c.num_classes, last, 1, 1, 1), last, c.num_classes, dt))
        self._add("head.bias", np.zeros(c.num_classes))

    def _build_prompts(self, rng):
        pc = self.prompt_config
        if pc.mode == "none":
            return
        scale = default_prompt_scale(self.config) if pc.init_scale is None else pc.init_scale
        for k in range(len(pc.sites)):
            self._add(f"prompts.{k}", rng.uniform(-scale, scale, size=(pc.num_prompts, self.config.embed_dim)))

    # -- registry views ---------------------------------------------------

    @property
    def prompt_names(self):
        return [n for n in self.params if n.startswith("prompts.")]

    @property
    def backbone_names(self):
        return [n for n in self.params if not n.startswith("prompts.")]

    @property
    def head_names(self):
        return ["head.weight", "head.bias"]

    @property
    def last_block_names(self):
        t = len(self.config.skip_layers)
        return [f"decoder.stage{t}.block.weight", f"decoder.stage{t}.block.bias"]

    @property
    def prompts(self):
        return [self.params[n] for n in self.prompt_names]

    @property
    def fingerprint(self):
        return architecture_fingerprint(self.config, self.prompt_config)

    def num_parameters(self, names=None):
        names = self.params if names is None else names
        return sum(self.params[n].size for n in names)

    def backbone_digest(self):
        h = hashlib.sha256()
        for n in self.backbone_names:
            h.update(n.encode())
            h.update(self.params[n].data.tobytes())
        return h.hexdigest()

    # -- copies -----------------------------------------------------------

    def _clone_into(self, other, names):
        for n in names:
            other.params[n].data[...] = self.params[n].data

    def copy(self):
        other = SegModel.__new__(SegModel)
        other.config, other.prompt_config, other.seed, other.dtype = self.config, self.prompt_config, self.seed, self.dtype
        other.params = {n: Tensor(t.data.copy(), dtype=t.dtype, name=n) for n, t in self.params.items()}
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype).type
        other.params = {n: Tensor(t.data, dtype=other.dtype, name=n) for n, t in other.params.items()}
        return other

    def with_prompts(self, prompt_config, seed=None):
        """A new model sharing copies of this backbone, with fresh prompts."""
        other = SegModel(self.config, prompt_config, seed=self.seed if seed is None else seed, dtype=self.dtype)
        self._clone_into(other, self.backbone_names)
        return other

    def parameters(self):
        return list(self.params.values())

    # -- forward ----------------------------------------------------------

    def forward(self, x, prompts=None):
        return forward(self, x, prompts)

    def __call__(self, x, prompts=None):
        return forward(self, x, prompts)[0]

    def predict_logits(self, volume):
        return predict_logits(self, volume)


def patchify(volume, patch_size):
    """(C, X, Y, Z) -> (n, C*K^3), tokens row-major over the patch grid."""
    c, x, y, z = volume.shape
    k = patch_size
    if x % k or y % k or z % k:
        raise ConfigError(f"volume extents {(x, y, z)} are not divisible by patch size {k}")
    v = volume.reshape(c, x // k, k, y // k, k, z // k, k)
    return v.transpose(1, 3, 5, 0, 2, 4, 6).reshape(-1, c * k**3)


def patch_embed(model, x):
    """Project non-overlapping patches to the embedding width and add positions."""
    cfg = model.config
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.shape != (cfg.in_channels,) + cfg.volume_shape:
        if data.ndim == 4 and any(v % cfg.patch_size for v in data.shape[1:]):
            raise ConfigError(f"input extents {data.shape[1:]} are not divisible by patch size {cfg.patch_size}")
        raise DimensionError(f"expected input {(cfg.in_channels,) + cfg.volume_shape}, got {data.shape}")
    patches = Tensor(patchify(data, cfg.patch_size), dtype=model.dtype)
    p = model.params
    return ag.add(ag.add(ag.matmul(patches, p["embed.proj.weight"]), p["embed.proj.bias"]), p["embed.pos"])


def concat_prompts(prompts, tokens):
    """[P; tokens] with prompts in rows [0, p). An empty prompt set returns ``tokens`` itself."""
    if prompts is None or prompts.shape[0] == 0:
        return tokens
    if prompts.ndim != 2 or prompts.shape[1] != tokens.shape[1]:
        raise DimensionError(f"prompt shape {prompts.shape} does not match token width {tokens.shape}")
    return ag.concat([prompts, tokens], axis=0)


def _split_heads(t, heads):
    m, d = t.shape
    return ag.transpose(ag.reshape(t, (m, heads, d // heads)), (1, 0, 2))


def encoder_layer(model, seq, layer, return_attention=False):
    """Pre-norm transformer block; every row attends to every row."""
    if seq.ndim != 2 or seq.shape[0] < 1 or seq.shape[1] != model.config.embed_dim:
        raise DimensionError(f"encoder input must be (m >= 1, {model.config.embed_dim}), got {seq.shape}")
    p = model.params
    pre = f"encoder.{layer}."
    heads = model.config.num_heads
    m, d = seq.shape
    eps = model.config.ln_eps

    h = ag.layer_norm(seq, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], eps)
    q = _split_heads(ag.add(ag.matmul(h, p[pre + "attn.wq"]), p[pre + "attn.bq"]), heads)
    k = _split_heads(ag.add(ag.matmul(h, p[pre + "attn.wk"]), p[pre + "attn.bk"]), heads)
    v = _split_heads(ag.add(ag.matmul(h, p[pre + "attn.wv"]), p[pre + "attn.bv"]), heads)
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d // heads))
    attn = ag.softmax_rows(scores)
    ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (1, 0, 2)), (m, d))
    seq = ag.add(seq, ag.add(ag.matmul(ctx, p[pre + "attn.wo"]), p[pre + "attn.bo"]))

    h = ag.layer_norm(seq, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], eps)
    h = ag.gelu(ag.add(ag.matmul(h, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
    seq = ag.add(seq, ag.add(ag.matmul(h, p[pre + "mlp.w2"]), p[pre + "mlp.b2"]))
    if return_attention:
        return seq, attn.data
    return seq


def encode(model, tokens, prompts=()):
    """Run the encoder, injecting ``prompts[k]`` at ``prompt_config.sites[k]``.

    At a site the previous prompt outputs are dropped and the fresh prompts
    are prepended to the current patch rows; between sites the full
    sequence (prompts included) is carried unchanged in composition.
    Returns ``{skip layer: patch-token state (n x d)}``.
    """
    cfg, pc = model.config, model.prompt_config
    site_map = dict(zip(pc.sites, prompts))
    seq, n_prompt, skips = tokens, 0, {}
    for i in range(1, cfg.depth + 1):
        if i in site_map:
            patch_rows = seq if n_prompt == 0 else seq[n_prompt:]
            seq = concat_prompts(site_map[i], patch_rows)
            n_prompt = site_map[i].shape[0]
        seq = encoder_layer(model, seq, i)
        if i in cfg.skip_layers:
            skips[i] = seq if n_prompt == 0 else seq[n_prompt:]
    return skips


def tokens_to_volume(tokens, config):
    """(n, d) -> (d, X/K, Y/K, Z/K)."""
    return ag.reshape(ag.transpose(tokens), (config.embed_dim,) + config.grid)


def decode(model, skips, x):
    """Map patch-token skip states (plus the raw input) to class logits."""
    cfg, p = model.config, model.params
    missing = [s for s in cfg.skip_layers if s not in skips]
    if missing:
        raise ContractError(f"decoder is missing skip states for layers {missing}")
    n = cfg.num_tokens
    for layer, state in skips.items():
        if state.shape != (n, cfg.embed_dim):
            raise DimensionError(f"skip state {layer} has shape {state.shape}, expected {(n, cfg.embed_dim)}")
    xin = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=model.dtype)
    factors, stages = cfg.stage_factors, len(cfg.skip_layers)

    h = tokens_to_volume(skips[cfg.skip_layers[-1]], cfg)
    for t in range(1, stages + 1):
        pre = f"decoder.stage{t}."
        h = ag.gelu(ag.conv_transpose3d(h, p[pre + "up.weight"], p[pre + "up.bias"], stride=factors[t - 1]))
        if t < stages:
            z = tokens_to_volume(skips[cfg.skip_layers[stages - 1 - t]], cfg)
            for j in range(1, t + 1):
                z = ag.gelu(ag.conv_transpose3d(z, p[pre + f"skip{j}.weight"], p[pre + f"skip{j}.bias"], stride=factors[j - 1]))
        else:
            z = ag.gelu(ag.conv3d(xin, p["decoder.input.weight"], p["decoder.input.bias"], padding=1))
        h = ag.gelu(ag.conv3d(ag.concat([h, z], axis=0), p[pre + "block.weight"], p[pre + "block.bias"], padding=1))
    return ag.conv3d(h, p["head.weight"], p["head.bias"])


def forward(model, x, prompts=None):
    """Full pass for any prompt mode. Returns ``(logits, skip states)``."""
    pc = model.prompt_config
    if prompts is None:
        prompts = model.prompts
    prompts = list(prompts)
    if pc.mode == "none" and prompts:
        raise ContractError("a promptless model was given prompts")
    if pc.mode != "none":
        if len(prompts) != len(pc.sites):
            raise ContractError(f"{len(pc.sites)} prompt sites configured but {len(prompts)} prompt matrices given")
        for P in prompts:
            if P.shape != (pc.num_prompts, model.config.embed_dim):
                raise DimensionError(f"prompt matrix {P.shape} != {(pc.num_prompts, model.config.embed_dim)}")
    tokens = patch_embed(model, x)
    skips = encode(model, tokens, prompts)
    return decode(model, skips, x), skips


def forward_shallow(model, x, prompt=None):
    if model.prompt_config.mode != "shallow":
        raise ContractError(f"forward_shallow on a model in mode {model.prompt_config.mode!r}")
    return forward(model, x, None if prompt is None else [prompt])


def forward_deep(model, x, prompts=None):
    if model.prompt_config.mode != "deep":
        raise ContractError(f"forward_deep on a model in mode {model.prompt_config.mode!r}")
    return forward(model, x, prompts)


def _window_starts(extent, window):
    if window > extent:
        raise DimensionError(f"window {window} larger than volume extent {extent}")
    starts = list(range(0, extent - window + 1, window))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def predict_logits(model, volume):
    """Logits over a whole volume by tiling it with model-sized windows.

    Overlapping tiles (when an extent is not a multiple of the window) are
    averaged. Runs without recording a graph.
    """
    cfg = model.config
    volume = np.asarray(volume)
    win = cfg.volume_shape
    with ag.no_grad():
        if volume.shape[1:] == win:
            return model(volume.astype(model.dtype, copy=False)).data
        out = np.zeros((cfg.num_classes,) + volume.shape[1:], dtype=np.float64)
        count = np.zeros(volume.shape[1:], dtype=np.float64)
        for sx in _window_starts(volume.shape[1], win[0]):
            for sy in _window_starts(volume.shape[2], win[1]):
                for sz in _window_starts(volume.shape[3], win[2]):
                    sl = (slice(sx, sx + win[0]), slice(sy, sy + win[1]), slice(sz, sz + win[2]))
                    tile = np.ascontiguousarray(volume[(slice(None),) + sl], dtype=model.dtype)
                    out[(slice(None),) + sl] += model(tile).data
                    count[sl] += 1
    return (out / count).astype(model.dtype)
