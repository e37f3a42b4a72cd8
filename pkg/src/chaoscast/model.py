"""The forecasting backbone.

A linear patch embedder feeds a residual stack of selective state-space
layers. Each layer reads the running residual stream, emits a decoded
contribution, and subtracts it from the stream; the sum of contributions
drives a linear next-patch head. Auxiliary multi-patch modules (training
only) refine the trunk state against teacher tokens further ahead. Rollout
is incremental: hidden states carry across generated patches and delay
coordinates of generated steps are rebuilt from the generated raw series.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .dynamics import Trajectory
from .embedding import EmbeddingConfig, PatchSequence, Standardizer
from .errors import ConfigError, NotEnoughPatchesError, RolloutDivergedError, ShapeError
from .numcore import Tensor


@dataclass
class ModelConfig:
    d: int = 64                 # token width
    n_layers: int = 2           # residual stack depth L
    n_mpp: int = 2              # multi-patch prediction depth M (0 disables)
    expand: int = 2             # inner width multiplier
    head_dim: int = 64
    state_size: int = 16        # SSM state per head
    patch_size: int = 10
    n_vars: int = 3
    window_len: int = 30        # context length in steps (encoder head size)
    emb_m: int = 3
    emb_tau: int = 7
    pir_enabled: bool = True    # delay embedding on/off
    rs_enabled: bool = True     # residual stacking vs conventional stacking
    encoder_oriented: bool = False
    exact_zoh: bool = False     # exact input discretization instead of dt*B
    rollout_envelope: float = 1e3
    rmsnorm_eps: float = 1e-6

    @property
    def inner(self) -> int:
        return self.expand * self.d

    @property
    def n_heads(self) -> int:
        if self.inner % self.head_dim:
            raise ConfigError(f"expand*d={self.inner} not divisible by head_dim={self.head_dim}")
        return self.inner // self.head_dim

    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(m=self.emb_m, tau=self.emb_tau, enabled=self.pir_enabled)

    @property
    def patch_width(self) -> int:
        m, _ = self.embedding().effective()
        return self.patch_size * self.n_vars * m

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def config_hash(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, K, d_in) @ (d_in, d_out) + bias, batch folded into the matmul."""
    B, K, din = x.shape
    flat = nc.reshape(x, (B * K, din))
    out = nc.add(nc.matmul(flat, w), b)
    return nc.reshape(out, (B, K, w.shape[1]))


class SsmLayer:
    """One selective state-space layer with scalar per-head decay.

    The incoming token stream is RMS-normalized (learnable gain) before the
    projections, which keeps every projection input at unit scale: rollouts
    stay bounded by the weight norms even when autoregressive feedback
    drifts off the training manifold. Per token: dt, B, C come from linear
    projections of the normalized token; the continuous decay
    A = -softplus(a_raw) stays negative so the discrete factor exp(dt*A)
    lies in (0, 1). The recurrence is evaluated sequentially and causally;
    hidden state starts at zero unless carried in from a previous chunk.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, inner, H, n = cfg.d, cfg.inner, cfg.n_heads, cfg.state_size
        self.cfg = cfg
        # a_raw chosen so exp(dt*A) ~ 0.9 at dt = 1
        a0 = np.log(np.expm1(-np.log(0.9)))
        self.p = {
            "norm_gain": _param(np.ones(d)),
            "w_in": _param(_uniform(rng, d, (d, inner))),
            "b_in": _param(np.zeros(inner)),
            "w_dt": _param(_uniform(rng, d, (d, H))),
            "b_dt": _param(np.zeros(H)),
            "w_b": _param(_uniform(rng, d, (d, n))),
            "b_b": _param(np.zeros(n)),
            "w_c": _param(_uniform(rng, d, (d, n))),
            "b_c": _param(np.zeros(n)),
            "a_raw": _param(np.full(H, a0)),
            "w_out": _param(_uniform(rng, inner, (inner, d))),
            "b_out": _param(np.zeros(d)),
        }

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.p.items()}

    def forward(self, tokens: Tensor, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        B, N, d = tokens.shape
        H, P, n = cfg.n_heads, cfg.head_dim, cfg.state_size
        normed = nc.rms_norm(tokens, self.p["norm_gain"], eps=cfg.rmsnorm_eps)
        flat = nc.reshape(normed, (B * N, d))
        x_in = nc.reshape(nc.add(nc.matmul(flat, self.p["w_in"]), self.p["b_in"]),
                          (B, N, H, P))
        dt = nc.reshape(nc.softplus(nc.add(nc.matmul(flat, self.p["w_dt"]), self.p["b_dt"])),
                        (B, N, H))
        b_t = nc.reshape(nc.add(nc.matmul(flat, self.p["w_b"]), self.p["b_b"]), (B, N, n))
        c_t = nc.reshape(nc.add(nc.matmul(flat, self.p["w_c"]), self.p["b_c"]), (B, N, n))
        a = nc.mul(nc.softplus(self.p["a_raw"]), -1.0)  # (H,) negative

        h = h0 if h0 is not None else Tensor(np.zeros((B, H, P, n)))
        ys = []
        for t in range(N):
            dt_t = dt[:, t]                                  # (B, H)
            abar = nc.exp(nc.mul(dt_t, a))                   # (B, H) in (0, 1)
            if cfg.exact_zoh:
                coef = nc.mul(nc.sub(abar, 1.0), nc.reciprocal(a))
            else:
                coef = dt_t
            inc = nc.mul(nc.mul(nc.reshape(coef, (B, H, 1, 1)),
                                nc.reshape(b_t[:, t], (B, 1, 1, n))),
                         nc.reshape(x_in[:, t], (B, H, P, 1)))
            h = nc.add(nc.mul(nc.reshape(abar, (B, H, 1, 1)), h), inc)
            y = nc.sum_(nc.mul(h, nc.reshape(c_t[:, t], (B, 1, 1, n))), axis=-1)
            ys.append(nc.reshape(y, (B, 1, H * P)))
        seq = ys[0] if N == 1 else nc.concat(ys, axis=1)
        out = _linear(seq, self.p["w_out"], self.p["b_out"])
        return out, h


class ForecastModel:
    """Patch embedder + residual SSM stack + prediction heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, w = cfg.d, cfg.patch_width
        self.w_emb = _param(_uniform(rng, w, (w, d)))
        self.b_emb = _param(np.zeros(d))
        self.layers = [SsmLayer(cfg, rng) for _ in range(cfg.n_layers)]
        # contribution decoders start at zero: the residual stream is the
        # token sequence itself until training moves them
        self.dec_e_w = [_param(np.zeros((d, d))) for _ in range(cfg.n_layers)]
        self.dec_e_b = [_param(np.zeros(d)) for _ in range(cfg.n_layers)]
        self.dec_p_w = _param(_uniform(rng, d, (d, w)))
        self.dec_p_b = _param(np.zeros(w))
        self.mpp = []
        for _ in range(cfg.n_mpp):
            self.mpp.append({
                "psi_w": _param(_uniform(rng, 2 * d, (2 * d, d))),
                "psi_b": _param(np.zeros(d)),
                "gain": _param(np.ones(d)),
                "ssm": SsmLayer(cfg, rng),
            })
        if cfg.encoder_oriented:
            n_ctx = cfg.window_len // cfg.patch_size
            out_dim = cfg.window_len * cfg.n_vars
            self.w_enc = _param(_uniform(rng, n_ctx * d, (n_ctx * d, out_dim)))
            self.b_enc = _param(np.zeros(out_dim))
        self.standardizer = Standardizer(mean=np.zeros(cfg.n_vars), std=np.ones(cfg.n_vars))

    # -- parameters -------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {"w_emb": self.w_emb, "b_emb": self.b_emb,
               "dec_p.w": self.dec_p_w, "dec_p.b": self.dec_p_b}
        for l, layer in enumerate(self.layers):
            out.update(layer.named_params(f"layer{l}.ssm"))
            out[f"layer{l}.dec_e.w"] = self.dec_e_w[l]
            out[f"layer{l}.dec_e.b"] = self.dec_e_b[l]
        for m, mod in enumerate(self.mpp):
            out[f"mpp{m}.psi.w"] = mod["psi_w"]
            out[f"mpp{m}.psi.b"] = mod["psi_b"]
            out[f"mpp{m}.gain"] = mod["gain"]
            out.update(mod["ssm"].named_params(f"mpp{m}.ssm"))
        if self.cfg.encoder_oriented:
            out["enc.w"] = self.w_enc
            out["enc.b"] = self.b_enc
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_params().values())

    # -- embedding --------------------------------------------------------

    def embed_series(self, series: Tensor) -> tuple[Tensor, Tensor]:
        """Standardized raw steps (B, T, V) -> (patches (B,N,w), tokens (B,N,d)).

        Differentiable delay embedding: delay coordinates are shifted slices
        of the series with a zero prefix standing in for pre-history.
        """
        cfg = self.cfg
        m, tau = cfg.embedding().effective()
        B, T, V = series.shape
        D = cfg.patch_size
        N = T // D
        if N < 1:
            raise NotEnoughPatchesError(f"series length {T} < one patch ({D})")
        pad = (m - 1) * tau
        padded = nc.concat([Tensor(np.zeros((B, pad, V))), series], axis=1) if pad else series
        cols = []
        for j in range(m):
            shift = (m - 1 - j) * tau
            start = pad - shift
            cols.append(nc.reshape(padded[:, start:start + T], (B, T, V, 1)))
        emb = cols[0] if m == 1 else nc.concat(cols, axis=3)      # (B, T, V, m)
        block = emb[:, :N * D]
        patches = nc.reshape(block, (B, N, D * V * m))
        tokens = _linear(patches, self.w_emb, self.b_emb)
        return patches, tokens

    def embed_new_patch(self, padded: Tensor, t_start: int) -> Tensor:
        """Patch of delay coordinates for steps [t_start, t_start+D) of a
        series that already carries the zero prefix."""
        cfg = self.cfg
        m, tau = cfg.embedding().effective()
        B = padded.shape[0]
        D, V = cfg.patch_size, cfg.n_vars
        pad = (m - 1) * tau
        cols = []
        for j in range(m):
            shift = (m - 1 - j) * tau
            start = pad + t_start - shift
            cols.append(nc.reshape(padded[:, start:start + D], (B, D, V, 1)))
        emb = cols[0] if m == 1 else nc.concat(cols, axis=3)
        return nc.reshape(emb, (B, 1, D * V * m))

    # -- trunk ------------------------------------------------------------

    def trunk_forward(self, tokens: Tensor, hiddens: list[Tensor] | None = None
                      ) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        """Run the stack over (B, N, d) tokens.

        Returns (trunk sums E, per-layer contributions, final hidden states).
        With residual stacking each layer consumes the running residual and E
        is the sum of decoded contributions; conventionally stacked layers
        feed forward and only the last decoder contributes.
        """
        cfg = self.cfg
        stream = tokens
        contribs = []
        new_hidden = []
        for l, layer in enumerate(self.layers):
            y, h = layer.forward(stream, None if hiddens is None else hiddens[l])
            new_hidden.append(h)
            if cfg.rs_enabled:
                e = _linear(y, self.dec_e_w[l], self.dec_e_b[l])
                contribs.append(e)
                stream = nc.sub(stream, e)
            else:
                stream = y
        if cfg.rs_enabled:
            E = contribs[0]
            for e in contribs[1:]:
                E = nc.add(E, e)
        else:
            E = _linear(stream, self.dec_e_w[-1], self.dec_e_b[-1])
            contribs = [E]
        return E, contribs, new_hidden

    def predict_next_patch(self, trunk_sum: Tensor) -> Tensor:
        """Linear map from trunk sums (B, K, d) to patch predictions (B, K, w)."""
        if trunk_sum.shape[-1] != self.cfg.d:
            raise ShapeError("predict_next_patch", trunk_sum.shape, (self.cfg.d,))
        return _linear(trunk_sum, self.dec_p_w, self.dec_p_b)

    def mpp_forward(self, trunk_sums: Tensor, tokens: Tensor) -> dict[int, Tensor]:
        """Depth-recursive multi-patch predictions.

        Depth m fuses the normalized previous-depth hidden state with the
        teacher token m patches ahead of the anchor and predicts the patch
        m+1 ahead; depths whose anchor set is empty are skipped.
        """
        cfg = self.cfg
        B, N, d = tokens.shape
        if cfg.n_mpp == 0:
            return {}
        if N < 3:
            raise NotEnoughPatchesError(f"multi-patch prediction needs >= 3 patches, got {N}")
        preds: dict[int, Tensor] = {}
        v = trunk_sums
        for depth in range(1, cfg.n_mpp + 1):
            K = N - depth
            if K < 1:
                break
            mod = self.mpp[depth - 1]
            v_in = nc.rms_norm(v[:, :K], mod["gain"], eps=cfg.rmsnorm_eps)
            fused = nc.concat([v_in, tokens[:, depth:depth + K]], axis=2)
            u = _linear(fused, mod["psi_w"], mod["psi_b"])
            v, _ = mod["ssm"].forward(u)
            if K - 1 >= 1:
                preds[depth] = self.predict_next_patch(v[:, :K - 1])
        return preds

    def encoder_forward(self, tokens: Tensor) -> Tensor:
        """Alternative head: flatten all tokens, emit a full window at once."""
        cfg = self.cfg
        B, N, d = tokens.shape
        flat = nc.reshape(tokens, (B, N * d))
        out = nc.add(nc.matmul(flat, self.w_enc), self.b_enc)
        return nc.reshape(out, (B, cfg.window_len, cfg.n_vars))

    # -- rollout ----------------------------------------------------------

    def rollout_core(self, series: Tensor, horizon_patches: int
                     ) -> tuple[Tensor, Tensor]:
        """Autoregressive forecast in standardized space.

        `series` is (B, T0, V); returns (raw steps (B, horizon*D, V),
        predicted patches (B, horizon, w)). Gradients flow through the whole
        rollout when recording is enabled.
        """
        cfg = self.cfg
        if horizon_patches < 1:
            raise ConfigError("horizon_patches must be >= 1")
        if cfg.encoder_oriented:
            return self._rollout_encoder(series, horizon_patches)
        m, tau = cfg.embedding().effective()
        B, T0, V = series.shape
        D = cfg.patch_size
        if T0 < D:
            raise NotEnoughPatchesError(f"context of {T0} steps < one patch ({D})")
        lead = T0 % D
        if lead:
            series = series[:, lead:]  # align patch boundaries to the context end
            T0 -= lead
        pad = (m - 1) * tau
        padded = nc.concat([Tensor(np.zeros((B, pad, V))), series], axis=1) if pad else series

        _, tokens = self.embed_series(series)
        E, _, hiddens = self.trunk_forward(tokens)
        n0 = tokens.shape[1]
        e_last = E[:, n0 - 1:n0]

        t_cur = T0
        raw_blocks = []
        patch_preds = []
        for k in range(horizon_patches):
            p_hat = self.predict_next_patch(e_last)            # (B, 1, w)
            patch_preds.append(p_hat)
            block = nc.reshape(p_hat, (B, D, V, m))
            raw = block[:, :, :, m - 1]
            peak = float(np.max(np.abs(raw.data)))
            if not np.isfinite(peak) or peak > cfg.rollout_envelope:
                raise RolloutDivergedError(step=t_cur + D - T0)
            raw_blocks.append(raw)
            padded = nc.concat([padded, raw], axis=1)
            if k == horizon_patches - 1:
                break
            token = _linear(self.embed_new_patch(padded, t_cur), self.w_emb, self.b_emb)
            e_last, _, hiddens = self.trunk_forward(token, hiddens)
            t_cur += D
        raw_steps = raw_blocks[0] if len(raw_blocks) == 1 else nc.concat(raw_blocks, axis=1)
        patches = patch_preds[0] if len(patch_preds) == 1 else nc.concat(patch_preds, axis=1)
        return raw_steps, patches

    def _rollout_encoder(self, series: Tensor, horizon_patches: int
                         ) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        B, T0, V = series.shape
        T = cfg.window_len
        if T0 < T:
            raise NotEnoughPatchesError(f"encoder head needs a {T}-step context, got {T0}")
        total = horizon_patches * cfg.patch_size
        window = series[:, T0 - T:]
        chunks = []
        produced = 0
        while produced < total:
            _, tokens = self.embed_series(window)
            out = self.encoder_forward(tokens)                 # (B, T, V)
            peak = float(np.max(np.abs(out.data)))
            if not np.isfinite(peak) or peak > cfg.rollout_envelope:
                raise RolloutDivergedError(step=produced)
            chunks.append(out)
            produced += T
            window = out
        steps = chunks[0] if len(chunks) == 1 else nc.concat(chunks, axis=1)
        raw_steps = steps[:, :total]
        # re-express the emitted steps as patches for loss bookkeeping
        patches, _ = self.embed_series(raw_steps)
        return raw_steps, patches


def embed_patch_sequence(model: ForecastModel, patches: PatchSequence) -> np.ndarray:
    """Linear token embedding of an (N, D*V*m) patch matrix."""
    P = np.asarray(patches.patches, dtype=np.float64)
    if P.shape[1] != model.w_emb.shape[0]:
        raise ShapeError("embed_patch_sequence", P.shape, model.w_emb.shape)
    return P @ model.w_emb.data + model.b_emb.data


def autoregressive_rollout(model: ForecastModel, context: Trajectory,
                           horizon_patches: int) -> Trajectory:
    """Forecast `horizon_patches * D` steps beyond the context.

    The context is standardized with the model's training statistics, rolled
    out patch by patch, and de-standardized. Multi-patch modules play no part
    here.
    """
    std = model.standardizer
    series = std.apply(context.states)[None]
    with nc.no_grad():
        raw, _ = model.rollout_core(Tensor(series), horizon_patches)
    out = std.invert(raw.data[0])
    return Trajectory(out, dt=context.dt,
                      steps_per_lyapunov_time=context.steps_per_lyapunov_time)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(model: ForecastModel, path_prefix: str, extra_meta: dict | None = None) -> None:
    cfg_dict = model.cfg.to_dict()
    meta = {
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "standardizer": {"mean": model.standardizer.mean.tolist(),
                         "std": model.standardizer.std.tolist()},
    }
    meta.update(extra_meta or {})
    nc.save_tensors(path_prefix, {k: t.data for k, t in model.named_params().items()}, meta)


def load_checkpoint(path_prefix: str) -> ForecastModel:
    named, meta = nc.load_tensors(path_prefix)
    cfg = ModelConfig.from_dict(meta["config"])
    model = ForecastModel(cfg, seed=0)
    params = model.named_params()
    if set(params) != set(named):
        raise ConfigError("checkpoint does not match the model parameter set")
    for k, t in params.items():
        if t.data.shape != named[k].shape:
            raise ShapeError("load_checkpoint", t.data.shape, named[k].shape)
        t.data = named[k]
    std = meta["standardizer"]
    model.standardizer = Standardizer(mean=np.asarray(std["mean"]),
                                      std=np.asarray(std["std"]))
    return model
