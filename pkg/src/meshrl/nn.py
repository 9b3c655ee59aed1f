"""Minimal reverse-mode autodiff on float64 numpy arrays.

A Tensor records its parents and a backward closure; backward() runs the
tape in reverse topological order, accumulating gradients only into branches
that contain trainable parameters.  The op set is exactly what the policy
architectures and trainers need: dense/conv linear algebra, ReLU, exp/log,
reductions, gather/segment ops for graphs and ragged batches, and a fused
masked log-softmax.

The masked log-softmax sums the shifted exponentials in sorted order, which
makes the normalizer (and hence every probability) invariant under
permutations of the inputs down to the last bit.  Masked-out entries get
log-probability -inf, so their probabilities are exactly 0.

Dense and conv layers draw truncated-normal weights (std 0.05, resampled
beyond two standard deviations) from per-layer seed streams, so models are
reproducible given a root seed.  Adam and SGD operate on flat parameter
dicts; checkpoints round-trip bit-exactly through npz.
"""

from __future__ import annotations

import json

import numpy as np


class Tensor:
    __slots__ = ("value", "parents", "bwd", "requires_grad", "grad")

    def __init__(self, value, parents=(), bwd=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a constant or use explicit ops")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(self.value)


class Parameter(Tensor):
    def __init__(self, value):
        super().__init__(value, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(param) into .grad of every reachable parameter."""
    if loss.value.shape != ():
        raise ValueError("backward() expects a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


# -- elementwise and linear ops -------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.value.shape))
    out.bwd = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.value, b.value.shape))
    out.bwd = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value @ b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.value.T if b.value.ndim == 2 else np.outer(g, b.value))
        if b.requires_grad:
            if a.value.ndim == 1:
                _accum(b, np.outer(a.value, g))
            else:
                _accum(b, a.value.T @ g)
    out.bwd = bwd
    return out


_signature: list | None = None


def _sig(pattern: np.ndarray):
    if _signature is not None:
        _signature.append(pattern.tobytes())


class record_signature:
    """Collect the piecewise-linear branch pattern of a forward pass.

    Finite differences only estimate the derivative where the loss is smooth
    across the stencil; comparing signatures at the perturbed points detects
    ReLU/min/clip kink crossings so such probes can be discarded.
    """

    def __enter__(self):
        global _signature
        self._prev = _signature
        _signature = []
        return _signature

    def __exit__(self, *exc):
        global _signature
        _signature = self._prev
        return False


def relu(x: Tensor) -> Tensor:
    keep = x.value > 0.0
    _sig(keep)
    out = Tensor(np.where(keep, x.value, 0.0), (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.where(keep, g, 0.0))
    out.bwd = bwd
    return out


def exp(x: Tensor) -> Tensor:
    v = np.exp(x.value)
    out = Tensor(v, (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * v)
    out.bwd = bwd
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.value), (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, g / x.value)
    out.bwd = bwd
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.value * x.value, (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, 2.0 * g * x.value)
    out.bwd = bwd
    return out


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.value.sum(axis=axis), (x,))

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accum(x, np.broadcast_to(g, x.value.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape).copy())
    out.bwd = bwd
    return out


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.value.reshape(shape), (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.value.shape))
    out.bwd = bwd
    return out


def concat(xs: list[Tensor], axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.value for x in xs], axis=axis), tuple(xs))
    sizes = [x.value.shape[axis] for x in xs]

    def bwd(g):
        off = 0
        for x, s in zip(xs, sizes):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(off, off + s)
                _accum(x, g[tuple(sl)])
            off += s
    out.bwd = bwd
    return out


def gather(x: Tensor, idx) -> Tensor:
    """Select rows (axis 0); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.value[idx], (x,))

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            np.add.at(gx, idx, g)
            _accum(x, gx)
    out.bwd = bwd
    return out


def segment_sum(x: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Sum rows of x into num_segments bins; empty bins give zero rows."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    v = np.zeros((num_segments,) + x.value.shape[1:])
    np.add.at(v, seg_ids, x.value)
    out = Tensor(v, (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, g[seg_ids])
    out.bwd = bwd
    return out


def narrow(x: Tensor, start: int, length: int) -> Tensor:
    """A contiguous row slice (axis 0)."""
    out = Tensor(x.value[start:start + length], (x,))

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            gx[start:start + length] = g
            _accum(x, gx)
    out.bwd = bwd
    return out


def stop_grad(x: Tensor) -> Tensor:
    return Tensor(x.value)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.value <= b.value
    _sig(take_a)
    out = Tensor(np.where(take_a, a.value, b.value), (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.where(take_a, g, 0.0))
        if b.requires_grad:
            _accum(b, np.where(take_a, 0.0, g))
    out.bwd = bwd
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.value >= b.value
    _sig(take_a)
    out = Tensor(np.where(take_a, a.value, b.value), (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.where(take_a, g, 0.0))
        if b.requires_grad:
            _accum(b, np.where(take_a, 0.0, g))
    out.bwd = bwd
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.value >= lo) & (x.value <= hi)
    _sig(inside)
    out = Tensor(np.clip(x.value, lo, hi), (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.where(inside, g, 0.0))
    out.bwd = bwd
    return out


def sum_tensors(xs: list[Tensor]) -> Tensor:
    total = xs[0]
    for x in xs[1:]:
        total = add(total, x)
    return total


# -- fused policy-head ops ------------------------------------------------

def masked_log_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Log-probabilities over the masked entries of a 1D logit vector.

    Masked-out entries come back as -inf (probability exactly 0).  The
    log-sum-exp accumulates the shifted exponentials in ascending sorted
    order, so the result is bitwise invariant under permutations of the
    masked entries.
    """
    mask = np.asarray(mask, dtype=bool)
    x = logits.value
    xm = x[mask]
    if xm.size == 0:
        raise ValueError("mask excludes every action")
    m = xm.max()
    z = np.exp(xm - m)
    s = np.sort(z).sum()
    lp = np.full_like(x, -np.inf)
    lp[mask] = (xm - m) - np.log(s)
    out = Tensor(lp, (logits,))
    p = np.zeros_like(x)
    p[mask] = np.exp(lp[mask])

    def bwd(g):
        if logits.requires_grad:
            gm = np.where(mask, g, 0.0)
            _accum(logits, gm - p * gm.sum())
    out.bwd = bwd
    return out


def plogp(logp: Tensor) -> Tensor:
    """p * log p from log p, with 0 * log 0 = 0 (for entropy terms)."""
    lp = logp.value
    finite = np.isfinite(lp)
    v = np.where(finite, np.exp(np.where(finite, lp, 0.0)) * lp, 0.0)
    out = Tensor(v, (logp,))

    def bwd(g):
        if logp.requires_grad:
            d = np.where(finite, np.exp(np.where(finite, lp, 0.0)) * (1.0 + lp), 0.0)
            _accum(logp, g * d)
    out.bwd = bwd
    return out


def conv2d(x: Tensor, W: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """Valid-padding 2D convolution, channels-last: (B,H,W,C) -> (B,OH,OW,F)."""
    xv = x.value
    B, H, Wd, C = xv.shape
    KH, KW, _, F = W.value.shape
    OH = (H - KH) // stride + 1
    OW = (Wd - KW) // stride + 1
    P = np.empty((B, OH, OW, KH, KW, C))
    for kh in range(KH):
        for kw in range(KW):
            P[:, :, :, kh, kw, :] = xv[:, kh:kh + stride * OH:stride,
                                       kw:kw + stride * OW:stride, :]
    Pm = P.reshape(B * OH * OW, KH * KW * C)
    Wm = W.value.reshape(KH * KW * C, F)
    out_v = (Pm @ Wm).reshape(B, OH, OW, F) + b.value
    out = Tensor(out_v, (x, W, b))

    def bwd(g):
        gm = g.reshape(B * OH * OW, F)
        if W.requires_grad:
            _accum(W, (Pm.T @ gm).reshape(W.value.shape))
        if b.requires_grad:
            _accum(b, gm.sum(axis=0))
        if x.requires_grad:
            gP = (gm @ Wm.T).reshape(B, OH, OW, KH, KW, C)
            gx = np.zeros_like(xv)
            for kh in range(KH):
                for kw in range(KW):
                    gx[:, kh:kh + stride * OH:stride,
                       kw:kw + stride * OW:stride, :] += gP[:, :, :, kh, kw, :]
            _accum(x, gx)
    out.bwd = bwd
    return out


# -- initialization, modules, optimizers ----------------------------------

def truncated_normal(rng: np.random.Generator, shape, std: float = 0.05) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    v = rng.normal(0.0, std, size=shape)
    bad = np.abs(v) > 2.0 * std
    while bad.any():
        v[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(v) > 2.0 * std
    return v


def _rng_from(ss: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(ss))


class Module:
    """Parameter container with stable, hierarchical naming."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}/{name}"
            if isinstance(val, Parameter):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}"))
                    elif isinstance(item, Parameter):
                        out[f"{key}.{i}"] = item
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.value.shape}")
            p.value = arr.copy()

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, ss: np.random.SeedSequence, std: float = 0.05):
        rng = _rng_from(ss)
        self.W = Parameter(truncated_normal(rng, (n_in, n_out), std))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.W), self.b)


class Conv2d(Module):
    def __init__(self, kh: int, kw: int, c_in: int, c_out: int,
                 ss: np.random.SeedSequence, stride: int = 2, std: float = 0.05):
        rng = _rng_from(ss)
        self.W = Parameter(truncated_normal(rng, (kh, kw, c_in, c_out), std))
        self.b = Parameter(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.W, self.b, self.stride)


class SGD:
    def __init__(self, params: dict[str, Parameter], lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.value = p.value - self.lr * p.grad

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"lr": self.lr}

    def load_state_dict(self, state: dict):
        self.lr = float(state["lr"])


class Adam:
    def __init__(self, params: dict[str, Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict):
        self.lr = float(state["lr"])
        self.t = int(state["t"])
        self.m = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state["v"].items()}


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path: str, model: Module, meta: dict | None = None,
                    optimizer=None) -> str:
    if not str(path).endswith(".npz"):
        path = f"{path}.npz"
    arrays = {f"param:{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None and isinstance(optimizer, Adam):
        st = optimizer.state_dict()
        arrays.update({f"adam_m:{k}": v for k, v in st["m"].items()})
        arrays.update({f"adam_v:{k}": v for k, v in st["v"].items()})
        meta = dict(meta or {})
        meta["adam"] = {"lr": st["lr"], "t": st["t"]}
    arrays["meta"] = np.frombuffer(json.dumps(meta or {}).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path: str, model: Module, optimizer=None) -> dict:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode()) if "meta" in z else {}
        state = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
        model.load_state_dict(state)
        if optimizer is not None and isinstance(optimizer, Adam) and "adam" in meta:
            st = {"lr": meta["adam"]["lr"], "t": meta["adam"]["t"],
                  "m": {k[len("adam_m:"):]: z[k] for k in z.files if k.startswith("adam_m:")},
                  "v": {k[len("adam_v:"):]: z[k] for k in z.files if k.startswith("adam_v:")}}
            optimizer.load_state_dict(st)
    return meta


def gradient_check(loss_fn, params: dict, rng: np.random.Generator,
                   per_param: int = 6, h: float = 1e-4):
    """Compare backprop gradients against central finite differences.

    ``loss_fn`` is called with no arguments and must return a scalar Tensor
    built from the current contents of the parameter arrays in ``params``
    (name -> Parameter).  For each parameter, up to ``per_param`` randomly
    chosen entries are probed.  A probe at +/-h only yields a valid
    derivative estimate if the piecewise-linear branch pattern (ReLU masks
    etc.) is the same at both stencil points as at the base point; probes
    that cross a kink are skipped rather than reported as failures.

    Returns ``(max_rel, n_checked, n_skipped)`` where ``max_rel`` is the
    worst relative discrepancy over all non-skipped probes.
    """
    for p in params.values():
        p.grad = None
    with record_signature() as base_sig:
        loss = loss_fn()
    backward(loss)
    grads = {name: (p.grad.copy() if p.grad is not None else
                    np.zeros_like(p.value))
             for name, p in params.items()}
    base = b"".join(base_sig)

    max_rel = 0.0
    n_checked = 0
    n_skipped = 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        idxs = rng.choice(n, size=min(per_param, n), replace=False)
        for i in idxs:
            keep = flat[i]
            fd = None
            ok = True
            vals = []
            for s in (+1.0, -1.0):
                flat[i] = keep + s * h
                with record_signature() as sig:
                    v = loss_fn()
                if b"".join(sig) != base:
                    ok = False
                vals.append(float(v.value))
            flat[i] = keep
            if not ok:
                n_skipped += 1
                continue
            fd = (vals[0] - vals[1]) / (2.0 * h)
            ad = float(grads[name].reshape(-1)[i])
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6)
            max_rel = max(max_rel, rel)
            n_checked += 1
    return max_rel, n_checked, n_skipped
