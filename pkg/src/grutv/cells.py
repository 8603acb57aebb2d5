"""Recurrent cells: masked GRU, GRU-T, GRU-TV and the decay variants.

Every function here is written in terms of the primitives in
:mod:`grutv.autodiff`, so it works on plain arrays (no tape active) and on
taped tensors alike.  Inputs may carry leading batch axes; parameters never do.

Gate input layout is ``[x, h, m]`` for every variant except GRU-TV, which
appends the previous step's hidden-state rate: ``[x, h, m, dh]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from grutv import autodiff as ad
from grutv.errors import ConfigurationError, DimensionError, OrderingError, UsageError


class CellVariant(str, enum.Enum):
    GRU = "gru"
    GRU_DECAY = "gru-decay"
    GRU_T = "gru-t"
    GRU_TV = "gru-tv"
    GRU_T_GH = "gru-t-gh"
    GRU_T_GX = "gru-t-gx"
    GRU_T_GHX = "gru-t-ghx"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for v in cls:
            if v.value == key or v.name.lower().replace("_", "-") == key:
                return v
        raise UsageError(f"unknown cell variant {name!r}; choose from {[v.value for v in cls]}")

    @property
    def time_aware(self):
        return self not in (CellVariant.GRU, CellVariant.GRU_DECAY)

    @property
    def velocity(self):
        return self is CellVariant.GRU_TV

    @property
    def decay_hidden(self):
        return self in (CellVariant.GRU_DECAY, CellVariant.GRU_T_GH, CellVariant.GRU_T_GHX)

    @property
    def decay_input(self):
        return self in (CellVariant.GRU_DECAY, CellVariant.GRU_T_GX, CellVariant.GRU_T_GHX)

    def gate_rows(self, d_r, d_h):
        return 2 * d_r + (2 * d_h if self.velocity else d_h)


@dataclass
class CellParams:
    """Gate weights (rows = gate input width, columns = hidden width) and biases.

    Fields hold numpy arrays, or leaf tensors after :meth:`on_tape`.  The
    hidden decay maps per-variable staleness to the hidden width; the input
    decay is diagonal (one weight per variable).
    """

    W_r: object
    W_z: object
    W_g: object
    b_r: object
    b_z: object
    b_g: object
    W_gh: object = None
    b_gh: object = None
    w_gx: object = None
    b_gx: object = None

    def __post_init__(self):
        rows, d_h = self.W_r.shape
        for name in ("W_z", "W_g"):
            if getattr(self, name).shape != (rows, d_h):
                raise DimensionError(
                    f"CellParams: {name} has shape {list(getattr(self, name).shape)}, expected {[rows, d_h]}"
                )
        for name in ("b_r", "b_z", "b_g"):
            if getattr(self, name).shape != (d_h,):
                raise DimensionError(f"CellParams: {name} must have length {d_h}")
        if (self.W_gh is None) != (self.b_gh is None) or (self.w_gx is None) != (self.b_gx is None):
            raise ConfigurationError("CellParams: decay weights and biases must be given together")

    @property
    def d_h(self):
        return self.W_r.shape[1]

    @property
    def d_r(self):
        if self.w_gx is not None:
            return self.w_gx.shape[0]
        if self.W_gh is not None:
            return self.W_gh.shape[0]
        return None

    @classmethod
    def init(cls, variant, d_r, d_h, rng, update_bias=0.0):
        """Uniform +-sqrt(1/fan_in) weights; zero biases except ``b_z = update_bias``."""
        variant = CellVariant.parse(variant)
        rows = variant.gate_rows(d_r, d_h)
        bound = math.sqrt(1.0 / rows)

        def gate():
            return rng.uniform(-bound, bound, size=(rows, d_h))

        kw = dict(W_r=gate(), W_z=gate(), W_g=gate(),
                  b_r=np.zeros(d_h), b_z=np.full(d_h, float(update_bias)), b_g=np.zeros(d_h))
        if variant.decay_hidden:
            b = math.sqrt(1.0 / d_r)
            kw.update(W_gh=rng.uniform(-b, b, size=(d_r, d_h)), b_gh=np.zeros(d_h))
        if variant.decay_input:
            kw.update(w_gx=rng.uniform(-1.0, 1.0, size=d_r), b_gx=np.zeros(d_r))
        return cls(**kw)

    def arrays(self):
        """Ordered ``{name: array}`` of the parameters that are present."""
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_arrays(cls, arrays):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})

    def on_tape(self, tape):
        return replace(self, **{k: tape.leaf(v) for k, v in self.arrays().items()})

    def check(self, variant, d_r):
        variant = CellVariant.parse(variant)
        rows = variant.gate_rows(d_r, self.d_h)
        if self.W_r.shape[0] != rows:
            raise DimensionError(
                f"{variant.value}: gate matrices need {rows} rows for D_r={d_r}, D_h={self.d_h}; "
                f"got {self.W_r.shape[0]}"
            )
        if variant.decay_hidden and self.W_gh is None:
            raise ConfigurationError(f"{variant.value} requires hidden decay parameters")
        if variant.decay_input and self.w_gx is None:
            raise ConfigurationError(f"{variant.value} requires input decay parameters")
        if self.W_gh is not None and self.W_gh.shape != (d_r, self.d_h):
            raise DimensionError(f"W_gh must be {[d_r, self.d_h]}, got {list(self.W_gh.shape)}")
        if self.w_gx is not None and self.w_gx.shape != (d_r,):
            raise DimensionError(f"w_gx must have length {d_r}")


@dataclass
class HeadParams:
    W_out: object
    b_out: object

    def __post_init__(self):
        if len(self.W_out.shape) != 2 or self.b_out.shape != (self.W_out.shape[1],) or self.W_out.shape[1] < 1:
            raise DimensionError(
                f"HeadParams: W_out {list(self.W_out.shape)} and b_out {list(self.b_out.shape)} do not conform"
            )

    @property
    def n_tasks(self):
        return self.W_out.shape[1]

    @classmethod
    def init(cls, d_h, n_tasks, rng):
        bound = math.sqrt(1.0 / d_h)
        return cls(rng.uniform(-bound, bound, size=(d_h, n_tasks)), np.zeros(n_tasks))

    def arrays(self):
        return {"W_out": self.W_out, "b_out": self.b_out}

    def on_tape(self, tape):
        return HeadParams(tape.leaf(self.W_out), tape.leaf(self.b_out))


@dataclass
class CellState:
    h: object
    dh: object
    x_last: object = None
    t_prev: float | None = None

    @classmethod
    def zeros(cls, d_h, x_default=None, batch=None):
        shape = (d_h,) if batch is None else (batch, d_h)
        x_last = None
        if x_default is not None:
            x_last = np.array(x_default, dtype=np.float64)
            if batch is not None:
                x_last = np.broadcast_to(x_last, (batch, x_last.shape[-1])).copy()
        return cls(np.zeros(shape), np.zeros(shape), x_last, None)


@dataclass
class StepTrace:
    r: object
    z: object
    g: object
    dh_new: object


def _data(t):
    return t.data if isinstance(t, ad.Tensor) else np.asarray(t, dtype=np.float64)


def _ones_like(t):
    return np.ones(_data(t).shape)


def _gates(p, h, x, m, dh_prev=None):
    extra = () if dh_prev is None else (dh_prev,)
    gate_in = ad.concat(x, h, m, *extra)
    if gate_in.shape[-1] != p.W_r.shape[0]:
        raise DimensionError(
            f"gate input width {gate_in.shape[-1]} does not match gate matrices with {p.W_r.shape[0]} rows"
        )
    r = ad.sigmoid(ad.affine(gate_in, p.W_r, p.b_r))
    z = ad.sigmoid(ad.affine(gate_in, p.W_z, p.b_z))
    g = ad.tanh(ad.affine(ad.concat(x, ad.hadamard(r, h), m, *extra), p.W_g, p.b_g))
    return r, z, g


def _rate(h, z, g):
    return ad.hadamard(ad.sub(_ones_like(z), z), ad.sub(g, h))


def _times(dt, v):
    """``dt * v`` where ``dt`` is a scalar or one value per batch row."""
    dt = np.asarray(dt, dtype=np.float64)
    if dt.ndim == 0:
        return ad.scale(float(dt), v)
    return ad.hadamard(np.broadcast_to(dt[..., None], _data(v).shape), v)


def _check_dt(dt):
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise OrderingError(f"negative elapsed time {dt.min()}; timestamps must be non-decreasing")
    return dt


def gru_masked_step(p, s, x, m):
    """Masked GRU update: ``h' = z*h + (1-z)*g``."""
    r, z, g = _gates(p, s.h, x, m)
    h_new = ad.add(ad.hadamard(z, s.h), ad.hadamard(ad.sub(_ones_like(z), z), g))
    return h_new, StepTrace(r, z, g, _rate(s.h, z, g))


def _substep_plan(dt, max_substep):
    """Split each row's gap into ``ceil(dt / max_substep)`` equal Euler steps.

    Yields ``(step, live)`` pairs; ``live`` is None when every row takes the
    step, else a 0/1 row mask (finished rows get a zero step).
    """
    if max_substep is None:
        yield dt, None
        return
    if max_substep <= 0:
        raise UsageError("max_substep must be positive")
    counts = np.maximum(1, np.ceil(dt / max_substep))
    step = dt / counts
    for k in range(int(np.max(counts))):
        live = (k < counts).astype(np.float64)
        if live.all():
            yield step, None
        else:
            yield step * live, live


def _keep(live, new, old):
    if live is None:
        return new
    on = np.broadcast_to(np.asarray(live)[..., None], _data(new).shape)
    return ad.add(ad.hadamard(on, new), ad.hadamard(1.0 - on, old))


def gru_t_step(p, s, x, m, dt, max_substep=None):
    """Euler update ``h' = h + dt * (1-z)*(g-h)`` with gates as in the masked GRU."""
    dt = _check_dt(dt)
    h, dh = s.h, None
    for step, live in _substep_plan(dt, max_substep):
        r, z, g = _gates(p, h, x, m)
        rate = _rate(h, z, g)
        dh = rate if dh is None else _keep(live, rate, dh)
        h = ad.add(h, _times(step, rate))
    return h, StepTrace(r, z, g, dh)


def gru_tv_step(p, s, x, m, dt, max_substep=None):
    """GRU-TV update: gates additionally read the carried rate ``s.dh``.

    Returns the new hidden state; the trace's ``dh_new`` is the rate to carry
    into the next step.
    """
    dt = _check_dt(dt)
    h, dh = s.h, s.dh
    for step, live in _substep_plan(dt, max_substep):
        r, z, g = _gates(p, h, x, m, dh)
        dh = _keep(live, _rate(h, z, g), dh)
        h = ad.add(h, _times(step, dh))
    return h, StepTrace(r, z, g, dh)


def _decay(weighted):
    return ad.exp(ad.scale(-1.0, ad.relu(weighted)))


def decay_hidden(p, delta, h):
    """Shrink ``h`` by ``exp(-max(0, delta @ W_gh + b_gh))``."""
    if p.W_gh is None:
        raise ConfigurationError("decay_hidden: parameters carry no hidden decay")
    if np.any(_data(delta) < 0):
        raise UsageError("decay_hidden: staleness must be non-negative")
    return ad.hadamard(h, _decay(ad.affine(delta, p.W_gh, p.b_gh)))


def input_decay(p, delta):
    if p.w_gx is None:
        raise ConfigurationError("decay_impute_input: parameters carry no input decay")
    return _decay(ad.add(ad.hadamard(delta, p.w_gx), p.b_gx))


def decay_impute_input(p, delta, x_raw, m, x_last, x_default):
    """Observed values pass through; missing ones blend the last observation toward the default."""
    m = _data(m)
    x_obs = np.where(m > 0, np.nan_to_num(_data(x_raw)), 0.0)
    gamma = input_decay(p, delta)
    blend = ad.add(ad.hadamard(gamma, x_last), ad.hadamard(ad.sub(_ones_like(gamma), gamma), x_default))
    return ad.add(x_obs, ad.hadamard(1.0 - m, blend))


def run_sequence(variant, p, seq, max_substep=None, return_states=False):
    """Unroll a cell over one prepared sequence from the zero state.

    Returns the final hidden state (and the per-step hidden states when
    ``return_states`` is set).
    """
    variant = CellVariant.parse(variant)
    n = len(seq.dt)
    if n == 0:
        raise UsageError("run_sequence: empty sequence")
    d_r = seq.values.shape[1]
    p.check(variant, d_r)
    h = np.zeros(p.d_h)
    dh = np.zeros(p.d_h)
    x_last = np.array(seq.defaults, dtype=np.float64)
    hs = []
    for i in range(n):
        x, m = seq.values[i], seq.mask[i]
        if variant.decay_hidden:
            h = decay_hidden(p, seq.delta[i], h)
        if variant.decay_input:
            x = decay_impute_input(p, seq.delta[i], seq.values[i], m, x_last, seq.defaults)
            x_last = np.where(m > 0, seq.values[i], x_last)
        state = CellState(h, dh, x_last, None if i == 0 else seq.t[i - 1])
        if variant.velocity:
            h, trace = gru_tv_step(p, state, x, m, seq.dt[i], max_substep)
        elif variant.time_aware:
            h, trace = gru_t_step(p, state, x, m, seq.dt[i], max_substep)
        else:
            h, trace = gru_masked_step(p, state, x, m)
        dh = trace.dh_new
        hs.append(h)
    return (h, hs) if return_states else h


@dataclass
class Batch:
    """Right-padded, time-major arrays for several prepared sequences."""

    values: np.ndarray   # (T, B, D_r) forward-filled inputs
    mask: np.ndarray     # (T, B, D_r)
    dt: np.ndarray       # (T, B)
    delta: np.ndarray    # (T, B, D_r)
    active: np.ndarray   # (T, B) 1 while the record exists
    defaults: np.ndarray  # (D_r,)
    labels: np.ndarray | None = None  # (B, K)

    @classmethod
    def from_sequences(cls, seqs):
        if not seqs:
            raise UsageError("empty batch")
        T = max(len(s.dt) for s in seqs)
        B = len(seqs)
        d_r = seqs[0].values.shape[1]
        values = np.zeros((T, B, d_r))
        mask = np.zeros((T, B, d_r))
        delta = np.zeros((T, B, d_r))
        dt = np.zeros((T, B))
        active = np.zeros((T, B))
        for b, s in enumerate(seqs):
            n = len(s.dt)
            values[:n, b] = s.values
            mask[:n, b] = s.mask
            delta[:n, b] = s.delta
            dt[:n, b] = s.dt
            active[:n, b] = 1.0
        labels = None
        if seqs[0].labels is not None:
            labels = np.stack([np.asarray(s.labels, dtype=np.float64) for s in seqs])
        return cls(values, mask, dt, delta, active, np.asarray(seqs[0].defaults, dtype=np.float64), labels)


def run_batch(variant, p, batch, max_substep=None):
    """Unroll over a padded batch; rows freeze once their sequence has ended.

    Gives the same final states as calling :func:`run_sequence` per row.
    """
    variant = CellVariant.parse(variant)
    T, B, d_r = batch.values.shape
    p.check(variant, d_r)
    h = np.zeros((B, p.d_h))
    dh = np.zeros((B, p.d_h))
    x_last = np.broadcast_to(batch.defaults, (B, d_r)).copy()
    for i in range(T):
        x, m = batch.values[i], batch.mask[i]
        h_in = h
        if variant.decay_hidden:
            h_in = decay_hidden(p, batch.delta[i], h)
        if variant.decay_input:
            x = decay_impute_input(p, batch.delta[i], x, m, x_last, batch.defaults)
            x_last = np.where(m > 0, batch.values[i], x_last)
        state = CellState(h_in, dh)
        if variant.velocity:
            h_new, trace = gru_tv_step(p, state, x, m, batch.dt[i], max_substep)
        elif variant.time_aware:
            h_new, trace = gru_t_step(p, state, x, m, batch.dt[i], max_substep)
        else:
            h_new, trace = gru_masked_step(p, state, x, m)
        live = batch.active[i]
        if live.all():
            h, dh = h_new, trace.dh_new
        else:
            on = np.broadcast_to(live[:, None], (B, p.d_h))
            off = 1.0 - on
            h = ad.add(ad.hadamard(on, h_new), ad.hadamard(off, h))
            if variant.velocity:
                dh = ad.add(ad.hadamard(on, trace.dh_new), ad.hadamard(off, dh))
    return h


def predict_head(hp, h):
    """Per-task probabilities ``sigmoid(h @ W_out + b_out)``."""
    if _data(h).shape[-1] != hp.W_out.shape[0]:
        raise DimensionError(
            f"predict_head: hidden width {_data(h).shape[-1]} does not match W_out {list(hp.W_out.shape)}"
        )
    return ad.sigmoid(ad.affine(h, hp.W_out, hp.b_out))
