"""Width-multiplier architecture enumeration and Pareto-frontier extraction."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

from .errors import ContractError, RangeError
from .nn import Activation, Conv2D, Dense, MaxPool2D, NetworkSpec, mlp
from .pruning import count_flops, count_params

DEFAULT_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)
TEMPLATES = ("fcnn", "mnist_cnn", "cifar_cnn")


@dataclass(frozen=True)
class SearchSpace:
    """Template plus multiplier grids.

    ``fcnn`` scales the first hidden layer by K1 and the remaining hidden
    layers by K2; the conv templates scale kernel counts by K1 and the fully
    connected widths by K2.
    """

    template: str = "fcnn"
    base: tuple = (784, 400, 400, 10)
    K1_grid: tuple = DEFAULT_GRID
    K2_grid: tuple = DEFAULT_GRID
    in_channels: int = 1
    image_side: int = 28
    head: str = "softmax"

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ContractError(f"unknown template {self.template!r}")
        if not self.K1_grid or not self.K2_grid:
            raise ContractError("multiplier grids must be nonempty")
        if any(k <= 0 for k in tuple(self.K1_grid) + tuple(self.K2_grid)):
            raise RangeError("multipliers must be positive")


def _width(base, k, axis):
    w = math.floor(base * k)
    if w < 1:
        raise RangeError(f"{axis}={k} gives width floor({base}*{k}) = 0")
    return w


def _conv_spec(space, k1, k2):
    if space.template == "mnist_cnn":
        convs, fcs = ((10, 4), (20, 4)), (80,)
    else:
        # K1 = 1 reproduces the teacher's 16 and 32 kernels
        convs, fcs = ((16, 5), (32, 5)), (200, 50)
    out_dim = space.base[-1]
    layers, ch, side = [], space.in_channels, space.image_side
    for base, ksz in convs:
        c = _width(base, k1, "K1")
        layers += [Conv2D(ch, c, ksz), Activation("relu")]
        side = side - ksz + 1
        layers.append(MaxPool2D(2))
        side //= 2
        ch = c
    width = ch * side * side
    for base in fcs:
        f = _width(base, k2, "K2")
        layers += [Dense(width, f), Activation("relu")]
        width = f
    layers += [Dense(width, out_dim), Activation(space.head)]
    return NetworkSpec((space.in_channels, space.image_side, space.image_side), tuple(layers))


def make_spec(space, k1, k2):
    if space.template == "fcnn":
        base = list(space.base)
        hidden = [_width(base[1], k1, "K1")] + [_width(h, k2, "K2") for h in base[2:-1]]
        return mlp([base[0]] + hidden + [base[-1]], space.head)
    return _conv_spec(space, k1, k2)


def arch_id(k1, k2):
    return f"k1={k1:g}_k2={k2:g}"


def enumerate_specs(space):
    """[(arch_id, K1, K2, spec)] over the grid product, identical specs dropped."""
    out, seen = [], set()
    for k1 in space.K1_grid:
        for k2 in space.K2_grid:
            spec = make_spec(space, k1, k2)
            if spec in seen:
                continue
            seen.add(spec)
            out.append((arch_id(k1, k2), k1, k2, spec))
    return out


def enumerate(space):  # noqa: A001 - public name mirrors the operation
    """Specs of every grid point, floored widths, duplicates removed."""
    return [s for _, _, _, s in enumerate_specs(space)]


@dataclass(frozen=True)
class ParetoPoint:
    arch_id: str
    metric: float
    flops: int
    params: int
    K1: float = 1.0
    K2: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.metric):
            raise ContractError(f"non-finite metric for {self.arch_id}")

    def cost(self, axis):
        return getattr(self, axis)


def pareto_frontier(points, cost="flops"):
    """Points not dominated in (metric, cost); exact duplicates are all kept.

    Sorted by cost, then metric, then id, independent of input order.
    """
    pts = sorted(points, key=lambda p: (p.metric, p.cost(cost), p.arch_id))
    keep, best_prev, i = [], math.inf, 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j].metric == pts[i].metric:
            j += 1
        group_min = pts[i].cost(cost)
        keep += [p for p in pts[i:j] if p.cost(cost) == group_min and p.cost(cost) < best_prev]
        best_prev = min(best_prev, group_min)
        i = j
    return sorted(keep, key=lambda p: (p.cost(cost), p.metric, p.arch_id))


@dataclass
class SearchResult:
    frontier: dict
    points: list
    best: ParetoPoint | None
    failures: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)


def _run_job(job):
    factory, aid, k1, k2, spec = job
    try:
        return aid, factory(spec, aid), None
    except Exception as err:  # recorded; the search continues
        return aid, None, f"{type(err).__name__}: {err}"


def run_search(space, job_factory, workers=1):
    """Train every enumerated student via ``job_factory(spec, arch_id)``.

    The factory returns ``(metric, model)`` where lower metric is better (or a
    bare metric). Failed jobs are recorded and left out of the frontier.
    """
    specs = enumerate_specs(space)
    jobs = [(job_factory, aid, k1, k2, spec) for aid, k1, k2, spec in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    points, failures, models = [], {}, {}
    for (aid, k1, k2, spec), (_, value, err) in zip(specs, results):
        if err is None:
            metric, model = value if isinstance(value, tuple) else (value, None)
            if not math.isfinite(metric):
                err = f"non-finite metric {metric}"
        if err is not None:
            failures[aid] = err
            continue
        points.append(ParetoPoint(aid, float(metric), count_flops(spec), count_params(spec), k1, k2))
        if model is not None:
            models[aid] = model
    frontier = {axis: pareto_frontier(points, axis) for axis in ("flops", "params")}
    best = min(points, key=lambda p: (p.metric, p.params, p.arch_id)) if points else None
    return SearchResult(frontier, points, best, failures, models)


def frontier_csv(result):
    on_f = {p.arch_id for p in result.frontier["flops"]}
    on_p = {p.arch_id for p in result.frontier["params"]}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arch_id", "K1", "K2", "metric", "flops", "params", "on_frontier", "on_frontier_params"])
    for p in result.points:
        w.writerow([p.arch_id, repr(p.K1), repr(p.K2), repr(p.metric), p.flops, p.params,
                    int(p.arch_id in on_f), int(p.arch_id in on_p)])
    return buf.getvalue()


def frontier_svg(points, frontier, cost="flops", metric_name="metric", title="", comment=None, size=(480, 360)):
    """Scatter of metric against log cost with the frontier as a polyline.

    ``comment`` lines are embedded verbatim as an XML comment (e.g. a manifest hash).
    """
    W, Hh = size
    pad = 56
    xs = [math.log10(max(p.cost(cost), 1)) for p in points]
    ys = [p.metric for p in points]
    if not points:
        xs, ys = [0.0], [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def sy(v):
        return Hh - pad - (v - y0) / (y1 - y0) * (Hh - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" viewBox="0 0 {W} {Hh}">']
    if comment:
        out.append("<!-- " + escape(comment).replace("--", "- -") + " -->")
    out.append(f'<rect width="{W}" height="{Hh}" fill="white"/>')
    out.append(f'<line x1="{pad}" y1="{Hh - pad}" x2="{W - pad}" y2="{Hh - pad}" stroke="black"/>')
    out.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{Hh - pad}" stroke="black"/>')
    out.append(f'<text x="{W / 2:.1f}" y="{Hh - 16}" text-anchor="middle" font-size="12">log10 {escape(cost)}</text>')
    out.append(f'<text x="16" y="{Hh / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {Hh / 2:.1f})">{escape(metric_name)}</text>')
    if title:
        out.append(f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for v in (x0, x1):
        out.append(f'<text x="{sx(v):.1f}" y="{Hh - pad + 14}" text-anchor="middle" font-size="10">{v:.2f}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{pad - 4}" y="{sy(v):.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    for p, x, y in zip(points, xs, ys):
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="#888"><title>{escape(p.arch_id)}</title></circle>')
    if frontier:
        coords = " ".join(f"{sx(math.log10(max(p.cost(cost), 1))):.2f},{sy(p.metric):.2f}" for p in frontier)
        out.append(f'<polyline points="{coords}" fill="none" stroke="#1f4fd8" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
