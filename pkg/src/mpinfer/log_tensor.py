"""Log-space tensors with named axes and a polynomial-time contraction engine.

Factors are dense arrays of log-values over two kinds of named axes:

* K-axes index the particles of one latent variable and are reduced by a
  numerically stable log-mean-exp, which absorbs one 1/K prefactor per axis.
* plate-axes index conditionally independent replicas and are reduced by
  plain addition of log-values (a product of per-member probabilities).

A contraction over all axes therefore evaluates

    log [ (1/K^n) sum over all particle-index combinations of
          the product of all factors ]

with plates contributing products across members. Validity of an
elimination order is governed by two rules:

* a K-axis may be reduced only while every plate axis still present in
  the factors containing it belongs to the owning latent's own plate
  nesting (otherwise a shared index would wrongly be averaged per member);
* a plate axis may be reduced only after every K-axis owned by a latent
  inside that plate is gone.

Orders are chosen greedily to minimise the size of the fused intermediate,
with deterministic tie-breaking by axis declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEvidenceError, PlanningError, ShapeError

K_AXIS = "K"
PLATE_AXIS = "plate"


@dataclass(frozen=True)
class Axis:
    """A named tensor axis.

    K-axes carry `plates`, the plate nesting of the latent that owns them;
    plate axes leave it empty.
    """

    name: str
    size: int
    kind: str = K_AXIS
    plates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.size <= 0:
            raise ShapeError(f"axis {self.name!r} must have positive size, got {self.size}")
        if self.kind not in (K_AXIS, PLATE_AXIS):
            raise ShapeError(f"axis {self.name!r} has unknown kind {self.kind!r}")
        if self.kind == PLATE_AXIS and self.plates:
            raise ShapeError(f"plate axis {self.name!r} cannot itself carry plates")


def k_axis(name: str, size: int, plates: tuple[str, ...] = ()) -> Axis:
    return Axis(name, size, K_AXIS, tuple(plates))


def plate_axis(name: str, size: int) -> Axis:
    return Axis(name, size, PLATE_AXIS)


class LogFactor:
    """A dense log-domain tensor over an ordered tuple of named axes.

    Entries are finite or -inf; NaN (and +inf) are construction errors.
    """

    __slots__ = ("axes", "values")

    def __init__(self, axes, values, *, validate: bool = True):
        axes = tuple(axes)
        values = np.asarray(values, dtype=np.float64)
        if validate:
            expected = tuple(a.size for a in axes)
            if values.shape != expected:
                raise ShapeError(
                    f"factor values have shape {values.shape}, axes require {expected}"
                )
            seen = {}
            for a in axes:
                prev = seen.setdefault(a.name, a)
                if prev != a:
                    raise ShapeError(f"axis {a.name!r} declared inconsistently")
            if np.isnan(values).any():
                raise ShapeError("log factor contains NaN")
            if np.isposinf(values).any():
                raise ShapeError("log factor contains +inf")
        self.axes = axes
        self.values = values

    @property
    def axis_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.axes)

    def axis(self, name: str) -> Axis:
        for a in self.axes:
            if a.name == name:
                return a
        raise ShapeError(f"axis {name!r} not present in factor over {self.axis_names}")

    def __repr__(self):
        return f"LogFactor({self.axis_names}, shape={self.values.shape})"


def _check_axis_consistency(axes):
    byname = {}
    for a in axes:
        prev = byname.setdefault(a.name, a)
        if prev != a:
            raise ShapeError(
                f"axis {a.name!r} used with conflicting declarations "
                f"({prev.size} vs {a.size} or differing kind/plates)"
            )
    return byname


def _aligned(values: np.ndarray, src: tuple[Axis, ...], dst: tuple[Axis, ...]) -> np.ndarray:
    """View of `values` broadcastable over the axis layout `dst`."""
    if src == dst:
        return values
    pos = [dst.index(a) for a in src]
    order = np.argsort(pos)
    arr = values.transpose(tuple(order)) if len(src) > 1 else values
    shape = [1] * len(dst)
    for p, a in zip(pos, src):
        shape[p] = a.size
    return arr.reshape(shape)


def log_mul(a: LogFactor, b: LogFactor) -> LogFactor:
    """Pointwise product of two factors in log space (broadcast addition)."""
    _check_axis_consistency(a.axes + b.axes)
    out_axes = a.axes + tuple(ax for ax in b.axes if ax not in a.axes)
    va = _aligned(a.values, a.axes, out_axes)
    vb = _aligned(b.values, b.axes, out_axes)
    return LogFactor(out_axes, va + vb, validate=False)


def _logmeanexp(values: np.ndarray, axis: int, log_k: float, destroy: bool = False) -> np.ndarray:
    """log((1/K) sum exp) along one axis; all-(-inf) slices stay -inf.

    With destroy=True and an owned writable array, works in place.
    """
    m = np.max(values, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    if destroy and values.base is None and values.flags.writeable:
        np.subtract(values, m_safe, out=values)
        np.exp(values, out=values)
        s = values.sum(axis=axis)
    else:
        s = np.exp(values - m_safe).sum(axis=axis)
    with np.errstate(divide="ignore"):
        out = np.log(s) - log_k
    return out + np.squeeze(m, axis=axis)


def reduce(t: LogFactor, axis, kind: str) -> LogFactor:
    """Reduce one axis of a factor.

    kind="mean": log-mean-exp over a K-axis (absorbs one 1/K prefactor).
    kind="sum": plain addition of log-values across a plate axis, i.e. a
    product of the per-member probabilities.
    """
    name = axis.name if isinstance(axis, Axis) else axis
    try:
        pos = t.axis_names.index(name)
    except ValueError:
        raise ShapeError(f"axis {name!r} not present in factor over {t.axis_names}") from None
    out_axes = t.axes[:pos] + t.axes[pos + 1:]
    if kind == "mean":
        values = _logmeanexp(t.values, pos, np.log(t.axes[pos].size))
    elif kind == "sum":
        values = t.values.sum(axis=pos)
    else:
        raise ShapeError(f"unknown reduction kind {kind!r}")
    return LogFactor(out_axes, values, validate=False)


@dataclass(frozen=True)
class PlanStep:
    """One elimination: fuse the listed operands, reduce one axis."""

    axis: Axis
    inputs: tuple[int, ...]
    reduction: str  # "mean" for K-axes, "sum" for plate axes
    fused_axes: tuple[Axis, ...]
    output_axes: tuple[Axis, ...]
    fused_size: int


@dataclass(frozen=True)
class ContractionPlan:
    """A validated elimination schedule for a fixed set of factor signatures.

    Operand ids 0..n-1 are the input factors in order; each step appends
    its output as the next id. `final_inputs` are the scalar operands left
    after all axes are reduced; their log-values add up to the result.
    """

    signatures: tuple[tuple[Axis, ...], ...]
    steps: tuple[PlanStep, ...]
    final_inputs: tuple[int, ...]
    peak_size: int
    axis_order: tuple[Axis, ...] = field(default=(), compare=False)


def plan_contraction(
    signatures,
    k_axes=None,
    plate_axes=None,
    order=None,
    keep=(),
) -> ContractionPlan:
    """Choose an elimination order over the factors' axes.

    `signatures` is a list of axis tuples, one per factor. When given,
    `k_axes` / `plate_axes` (sets of names) are checked against the axis
    kinds. `order` forces an explicit axis elimination order (used by
    tests to enumerate alternatives); it is validated like any other.
    `keep` names plate axes to leave unreduced, so execution yields one
    log-value per kept slice (independent replicas, per-member evidence).
    """
    signatures = tuple(tuple(sig) for sig in signatures)
    byname = _check_axis_consistency([a for sig in signatures for a in sig])
    decl_order = []
    seen = set()
    for sig in signatures:
        for a in sig:
            if a.name not in seen:
                seen.add(a.name)
                decl_order.append(a)
    decl_index = {a.name: i for i, a in enumerate(decl_order)}

    if k_axes is not None:
        expected = {a.name for a in decl_order if a.kind == K_AXIS}
        if set(k_axes) != expected:
            raise ShapeError(f"declared K-axes {sorted(k_axes)} != factor K-axes {sorted(expected)}")
    if plate_axes is not None:
        expected = {a.name for a in decl_order if a.kind == PLATE_AXIS}
        if set(plate_axes) != expected:
            raise ShapeError(
                f"declared plate axes {sorted(plate_axes)} != factor plate axes {sorted(expected)}"
            )
    for a in decl_order:
        if a.kind == K_AXIS:
            for p in a.plates:
                if p in byname and byname[p].kind != PLATE_AXIS:
                    raise ShapeError(f"K-axis {a.name!r} claims non-plate axis {p!r} as a plate")

    keep = frozenset(keep)
    for name in keep:
        if name in byname and byname[name].kind != PLATE_AXIS:
            raise ShapeError(f"kept axis {name!r} must be a plate axis")
    forced = list(order) if order is not None else None
    current: dict[int, frozenset[Axis]] = {i: frozenset(sig) for i, sig in enumerate(signatures)}
    remaining = {a.name: a for a in decl_order if a.name not in keep}
    steps = []
    peak = max((int(np.prod([a.size for a in sig])) for sig in signatures if sig), default=1)
    next_id = len(signatures)

    def reducible(axis: Axis, holders) -> bool:
        if axis.kind == PLATE_AXIS:
            return all(
                not (r.kind == K_AXIS and axis.name in r.plates) for r in remaining.values()
            )
        fused_plates = {
            a.name for h in holders for a in current[h] if a.kind == PLATE_AXIS
        }
        return fused_plates <= set(axis.plates)

    while remaining:
        candidates = []
        for axis in remaining.values():
            holders = [i for i, sig in current.items() if axis in sig]
            if not holders:
                # axis vanished from live factors: cannot happen for valid input
                raise PlanningError(f"axis {axis.name!r} appears in no live factor")
            if not reducible(axis, holders):
                continue
            fused = frozenset().union(*(current[i] for i in holders))
            size = int(np.prod([a.size for a in fused]))
            candidates.append((size, decl_index[axis.name], axis, holders, fused))
        if not candidates:
            raise PlanningError(
                "no reducible axis among "
                + ", ".join(sorted(remaining))
                + ": cyclic plate/K dependency admits no valid order"
            )
        if forced is not None:
            if not forced:
                raise PlanningError("forced order is shorter than the axis set")
            want = forced.pop(0)
            want_name = want.name if isinstance(want, Axis) else want
            match = [c for c in candidates if c[2].name == want_name]
            if not match:
                raise PlanningError(f"forced order reduces {want_name!r} while it is not reducible")
            size, _, axis, holders, fused = match[0]
        else:
            size, _, axis, holders, fused = min(candidates, key=lambda c: (c[0], c[1]))
        fused_axes = tuple(sorted(fused, key=lambda a: decl_index[a.name]))
        out_axes = tuple(a for a in fused_axes if a != axis)
        steps.append(
            PlanStep(
                axis=axis,
                inputs=tuple(sorted(holders)),
                reduction="mean" if axis.kind == K_AXIS else "sum",
                fused_axes=fused_axes,
                output_axes=out_axes,
                fused_size=size,
            )
        )
        peak = max(peak, size)
        for i in holders:
            del current[i]
        current[next_id] = frozenset(out_axes)
        next_id += 1
        del remaining[axis.name]

    if forced:
        raise PlanningError(f"forced order names absent axes: {forced}")
    final_inputs = tuple(sorted(current))
    return ContractionPlan(
        signatures=signatures,
        steps=tuple(steps),
        final_inputs=final_inputs,
        peak_size=peak,
        axis_order=tuple(s.axis for s in steps),
    )


def _check_factors(plan: ContractionPlan, factors) -> list[np.ndarray]:
    if len(factors) != len(plan.signatures):
        raise ShapeError(
            f"plan expects {len(plan.signatures)} factors, got {len(factors)}"
        )
    ops = []
    for f, sig in zip(factors, plan.signatures):
        if tuple(f.axes) != sig:
            raise ShapeError(f"factor over {f.axis_names} does not match plan signature {tuple(a.name for a in sig)}")
        ops.append(f.values)
    return ops


def _run_plan(plan: ContractionPlan, factors, record: bool):
    """Execute the plan; optionally retain per-step fused tensors and results."""
    ops: list = _check_factors(plan, factors)
    axes_of: list = [tuple(sig) for sig in plan.signatures]
    fused_log = [] if record else None
    for step in plan.steps:
        step_shape = tuple(a.size for a in step.fused_axes)
        fused = None
        owned = False
        for i in step.inputs:
            av = _aligned(ops[i], axes_of[i], step.fused_axes)
            if fused is None:
                fused = av
            elif owned and fused.shape == step_shape:
                fused += av
            else:
                fused = fused + av
                owned = True
        pos = step.fused_axes.index(step.axis)
        if step.reduction == "mean":
            out = _logmeanexp(
                fused, pos, np.log(step.axis.size), destroy=owned and not record
            )
        else:
            out = fused.sum(axis=pos)
        if record:
            fused_log.append(fused)
        ops.append(out)
        axes_of.append(step.output_axes)
    final_axes: tuple[Axis, ...] = ()
    for i in plan.final_inputs:
        final_axes = final_axes + tuple(a for a in axes_of[i] if a not in final_axes)
    total = np.zeros(tuple(a.size for a in final_axes))
    for i in plan.final_inputs:
        total = total + _aligned(ops[i], tuple(axes_of[i]), final_axes)
    return total, final_axes, ops, axes_of, fused_log


def execute(plan: ContractionPlan, factors) -> float:
    """Contract all factors to a scalar log-value following the plan."""
    total, final_axes, _, _, _ = _run_plan(plan, factors, record=False)
    if final_axes:
        raise ShapeError("plan keeps axes; use execute_keep for per-slice results")
    return float(total)


def execute_keep(plan: ContractionPlan, factors):
    """Contract all but the plan's kept plate axes.

    Returns (axes, values): one log-value per kept slice. With an
    outermost replica plate this evaluates many independent estimates in
    one vectorised pass.
    """
    total, final_axes, _, _, _ = _run_plan(plan, factors, record=False)
    return final_axes, np.asarray(total)


def execute_with_marginals(plan: ContractionPlan, factors):
    """Contract and return (log-result, per-factor posterior weights).

    The weights are the adjoints of the log-result with respect to each
    factor's log-values: linear-domain, non-negative, and for any factor
    appearing once per index combination they are the self-normalised
    posterior weights of that factor's index cells, per plate slice.
    Raises DegenerateEvidenceError when the result is -inf.
    """
    total, final_axes, ops, axes_of, fused_log = _run_plan(plan, factors, record=True)
    if final_axes:
        raise ShapeError("posterior weights require a full contraction (no kept axes)")
    total = float(total)
    if not np.isfinite(total):
        raise DegenerateEvidenceError("evidence estimate is zero; posterior weights undefined")

    n_inputs = len(plan.signatures)
    adjoint: dict[int, np.ndarray] = {i: np.array(1.0) for i in plan.final_inputs}

    for si in range(len(plan.steps) - 1, -1, -1):
        step = plan.steps[si]
        out_id = n_inputs + si
        fused = fused_log[si]
        result = ops[out_id]
        pos = step.fused_axes.index(step.axis)
        adj_out = np.broadcast_to(adjoint[out_id], tuple(a.size for a in step.output_axes))
        adj_out = np.expand_dims(adj_out, pos)
        if step.reduction == "mean":
            r = np.expand_dims(result, pos)
            r_safe = np.where(np.isfinite(r), r, 0.0)
            soft = np.exp(fused - np.log(step.axis.size) - r_safe)
            soft = np.where(np.isfinite(r), soft, 0.0)
            adj_fused = adj_out * soft
        else:
            adj_fused = np.broadcast_to(adj_out, tuple(a.size for a in step.fused_axes))
        for i in step.inputs:
            in_axes = axes_of[i]
            keep = [p for p, a in enumerate(step.fused_axes) if a in in_axes]
            drop = tuple(p for p in range(len(step.fused_axes)) if p not in keep)
            part = adj_fused.sum(axis=drop) if drop else adj_fused
            kept_axes = tuple(step.fused_axes[p] for p in keep)
            if kept_axes != in_axes:
                part = part.transpose(tuple(kept_axes.index(a) for a in in_axes))
            adjoint[i] = part

    weights = []
    for i in range(n_inputs):
        w = np.broadcast_to(adjoint[i], tuple(a.size for a in axes_of[i])).copy()
        weights.append(w)
    return total, weights


@dataclass(frozen=True)
class Weights:
    """Linear-domain posterior weights over a factor's axes."""

    axes: tuple[Axis, ...]
    values: np.ndarray


def posterior_marginals(factors, target: int, plan: ContractionPlan | None = None) -> Weights:
    """Posterior weight tensor of one factor's index cells.

    `target` is the factor's position in `factors`. For a factor whose
    axes include every K-axis the weights sum to 1; in general they sum
    to 1 over the factor's K-axes within each plate slice.
    """
    factors = list(factors)
    if not 0 <= target < len(factors):
        raise LookupError(f"unknown target factor {target}")
    if plan is None:
        plan = plan_contraction([f.axes for f in factors])
    _, weights = execute_with_marginals(plan, factors)
    return Weights(tuple(factors[target].axes), weights[target])
