"""Define-by-run reverse-mode autodiff.

Every differentiable op computes its forward value eagerly and, when any
input needs a gradient, calls :func:`record` to attach the parents and a
backward rule to the output tensor. :func:`backward` walks the resulting
graph in reverse topological order.

The tape is per thread: gradient mode is thread-local and graphs built on
different threads never share nodes.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np

from .errors import GradientError

if TYPE_CHECKING:
    from .tensor import Tensor

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def switch_monitor():
    """Collect fingerprints of the discrete choices (ReLU signs, max-pool
    winners) made by every op inside the block."""
    prev = getattr(_state, "switches", None)
    log: list[bytes] = []
    _state.switches = log
    try:
        yield log
    finally:
        _state.switches = prev


def note_switch(decision: np.ndarray) -> None:
    log = getattr(_state, "switches", None)
    if log is not None:
        log.append(hashlib.blake2b(np.ascontiguousarray(decision).tobytes(), digest_size=16).digest())


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def needs_grad(*inputs: "Tensor") -> bool:
    return is_grad_enabled() and any(t.requires_grad for t in inputs)


def record(out: "Tensor", parents: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
    """Attach ``parents`` and ``backward_fn`` to ``out`` if a gradient is needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``) per
    parent, in parent order.
    """
    if needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: "Tensor") -> list["Tensor"]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: "Tensor", grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf reached.

    The graph is released as it is consumed, so a second call on the same
    root only reaches leaves directly.
    """
    if not root.requires_grad:
        raise GradientError("root does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=root.data.dtype)
        if grad.shape != root.shape:
            raise GradientError(f"seed gradient shape {grad.shape} != root shape {root.shape}")

    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GradientError(f"backward rule produced {pg.shape} for parent {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: tuple[int, int] | None = None
    details: list[tuple[int, int, float, float]] = field(default_factory=list)
    refined: int = 0
    unresolved_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[], "Tensor"],
    params: Sequence["Tensor"],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_per_param: int | None = None,
    seed: int = 0,
    kink_retries: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` with central differences.

    ``params`` are leaf tensors (float64) that ``f`` reads. With
    ``max_per_param`` set, that many randomly chosen scalars of each
    parameter are checked instead of all of them.

    With ``kink_retries > 0`` the discrete choices of piecewise ops (ReLU
    signs, max-pool winners) are fingerprinted at the base point and at both
    probes. If a probe lands in a different linear piece the difference
    quotient is not an estimate of the derivative, so the step is divided by
    10 and retried, at most ``kink_retries`` times. Coordinates still
    straddling a switch after that are counted in ``unresolved_kinks`` and
    compared as they are.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise GradientError("grad_check runs in float64 only")
        p.requires_grad = True
        p.grad = None

    def value() -> float:
        return float(f().data.reshape(-1)[0])

    with no_grad():
        with switch_monitor() as base_switches:
            v1 = value()
        v2 = value()
    if v1 != v2:
        raise GradientError(f"f is not deterministic: {v1!r} != {v2!r}")

    out = f()
    if out.data.size != 1:
        raise GradientError("grad_check needs a scalar-valued f")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def probe(flat, i, x) -> tuple[float, list[bytes] | None]:
        flat[i] = x
        if not kink_retries:
            return value(), None
        with switch_monitor() as sw:
            v = value()
        return v, sw

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance, checked=0)
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            idx: Iterable[int] = range(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = sorted(rng.choice(flat.size, size=max_per_param, replace=False).tolist())
            for i in idx:
                orig = flat[i]
                h = eps
                for attempt in range(kink_retries + 1):
                    fp, sp = probe(flat, i, orig + h)
                    fm, sm = probe(flat, i, orig - h)
                    flat[i] = orig
                    if not kink_retries or (sp == base_switches and sm == base_switches):
                        break
                    if attempt == kink_retries:
                        report.unresolved_kinks += 1
                    else:
                        h /= 10.0
                        report.refined += 1
                numeric = (fp - fm) / (2 * h)
                a = float(analytic[pi].reshape(-1)[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                report.checked += 1
                report.details.append((pi, i, a, numeric))
                if report.worst is None or rel > report.max_rel_error:
                    report.max_rel_error = rel
                    report.worst = (pi, i)
    for p in params:
        p.grad = None
    return report
