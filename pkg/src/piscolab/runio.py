"""Run artifacts: training-log CSVs, checkpoints, manifests, SVG plots.

Every writer here is deterministic: identical inputs produce identical bytes.
Floats are serialized with repr, the shortest representation that round-trips
exactly, so reading a log back reconstructs the training rows bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
import zipfile

import numpy as np

from .errors import MissingArtifactError, SchemaError
from .ppo import TrainLogRow

_BASE_COLS = ("iter", "mean_return", "loss_pi", "loss_v",
              "entropy", "lr_heads", "lr_encoder")
_PISCO_COLS = ("iter", "mean_return", "loss_pi", "loss_v", "loss_pisco",
               "entropy", "lr_heads", "lr_encoder")


def _fmt(x) -> str:
    return repr(float(x))


def _ensure_dir(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# training logs


def write_train_log(path: str, rows) -> None:
    """CSV of TrainLogRows. The auxiliary-loss column appears only when the
    rows actually carry one (consistency training); plain runs omit it."""
    rows = list(rows)
    with_pisco = any(r.loss_pisco is not None for r in rows)
    cols = _PISCO_COLS if with_pisco else _BASE_COLS
    _ensure_dir(path)
    lines = [",".join(cols)]
    for r in rows:
        vals = [str(r.iteration), _fmt(r.mean_return), _fmt(r.loss_pi),
                _fmt(r.loss_v)]
        if with_pisco:
            vals.append(_fmt(r.loss_pisco))
        vals += [_fmt(r.entropy), _fmt(r.lr_heads), _fmt(r.lr_encoder)]
        lines.append(",".join(vals))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_train_log(path: str) -> list[TrainLogRow]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"training log not found: {path}")
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines:
        raise SchemaError(f"training log {path} is empty")
    header = tuple(lines[0].split(","))
    if header == _PISCO_COLS:
        with_pisco = True
    elif header == _BASE_COLS:
        with_pisco = False
    else:
        raise SchemaError(f"unrecognized training log header in {path}: "
                          f"{lines[0]!r}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise SchemaError(f"malformed row in {path}: {ln!r}")
        it = int(parts[0])
        vals = [float(p) for p in parts[1:]]
        if with_pisco:
            mr, lpi, lv, lpis, ent, lrh, lre = vals
            pis = lpis
        else:
            mr, lpi, lv, ent, lrh, lre = vals
            pis = None
        rows.append(TrainLogRow(iteration=it, mean_return=mr, loss_pi=lpi,
                                loss_v=lv, loss_pisco=pis, entropy=ent,
                                lr_heads=lrh, lr_encoder=lre))
    return rows


def write_table(path: str, header, rows) -> None:
    """Small report CSV: floats via repr, everything else via str."""
    _ensure_dir(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, agent, meta: dict) -> None:
    """All agent parameters plus a JSON metadata blob, one npz file."""
    _ensure_dir(path)
    payload = {f"param:{k}": t.data for k, t in agent.params().items()}
    payload["meta"] = np.asarray(json.dumps(meta, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path: str):
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            files = dict(npz)
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise SchemaError(f"checkpoint {path} is not readable: {exc}")
    if "meta" not in files:
        raise SchemaError(f"checkpoint {path} has no metadata entry")
    meta = json.loads(str(files["meta"]))
    params = {k[len("param:"):]: v for k, v in files.items()
              if k.startswith("param:")}
    if not params:
        raise SchemaError(f"checkpoint {path} holds no parameters")
    return params, meta


def load_agent_params(agent, path: str, prefix: str = "") -> dict:
    """Copy checkpoint values into an agent's parameters in place.

    With a prefix, only matching parameter names are touched (and all of
    them must exist in the file); shapes must agree exactly.
    """
    params, meta = load_checkpoint(path)
    for name, tensor in agent.params().items():
        if not name.startswith(prefix):
            continue
        if name not in params:
            raise SchemaError(f"checkpoint {path} is missing parameter {name}")
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise SchemaError(
                f"checkpoint parameter {name} has shape {arr.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data[...] = arr.astype(np.float32)
    return meta


def load_encoder_into(agent, path: str) -> dict:
    """Restore just the feature encoder; heads keep their fresh init."""
    return load_agent_params(agent, path, prefix="encoder.")


# ---------------------------------------------------------------------------
# manifests


@dataclasses.dataclass(frozen=True)
class RunManifest:
    config_hash: str
    seed: int
    revision: str
    started: str
    finished: str
    outputs: list
    effective_config: dict


def write_manifest(path: str, manifest: RunManifest) -> None:
    _ensure_dir(path)
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str) -> RunManifest:
    if not os.path.exists(path):
        raise MissingArtifactError(f"manifest not found: {path}")
    with open(path) as fh:
        data = json.load(fh)
    wanted = {f.name for f in dataclasses.fields(RunManifest)}
    if set(data) != wanted:
        raise SchemaError(f"manifest {path} fields {sorted(data)} do not "
                          f"match {sorted(wanted)}")
    return RunManifest(**data)


# ---------------------------------------------------------------------------
# plots

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 64, 20, 40, 48


def _ticks(lo: float, hi: float, n: int = 5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def svg_line_plot(path: str, series: dict, title: str = "",
                  x_label: str = "", y_label: str = "") -> None:
    """Minimal multi-series line plot; series maps label -> list of y."""
    _ensure_dir(path)
    longest = max((len(v) for v in series.values()), default=0)
    all_vals = [float(y) for v in series.values() for y in v]
    lo = min(all_vals, default=0.0)
    hi = max(all_vals, default=1.0)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def sx(i, n):
        frac = 0.5 if n <= 1 else i / (n - 1)
        return _ML + frac * pw

    def sy(y):
        return _MT + (hi - float(y)) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
           f'height="{_H}" viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" '
           f'font-size="15" font-family="sans-serif">{title}</text>']
    # axes
    out.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" '
               f'stroke="black"/>')
    out.append(f'<line x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" '
               f'y2="{_MT + ph}" stroke="black"/>')
    for tv in _ticks(lo + pad, hi - pad):
        y = sy(tv)
        out.append(f'<line x1="{_ML - 4}" y1="{y:.1f}" x2="{_ML}" y2="{y:.1f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{_ML - 8}" y="{y + 4:.1f}" text-anchor="end" '
                   f'font-size="11" font-family="sans-serif">{tv:.3g}</text>')
    if longest > 1:
        for i in range(0, longest, max(1, (longest - 1) // 5)):
            x = sx(i, longest)
            out.append(f'<line x1="{x:.1f}" y1="{_MT + ph}" x2="{x:.1f}" '
                       f'y2="{_MT + ph + 4}" stroke="black"/>')
            out.append(f'<text x="{x:.1f}" y="{_MT + ph + 18}" '
                       f'text-anchor="middle" font-size="11" '
                       f'font-family="sans-serif">{i}</text>')
    out.append(f'<text x="{_ML + pw / 2:.1f}" y="{_H - 8}" '
               f'text-anchor="middle" font-size="12" '
               f'font-family="sans-serif">{x_label}</text>')
    out.append(f'<text x="16" y="{_MT + ph / 2:.1f}" text-anchor="middle" '
               f'font-size="12" font-family="sans-serif" '
               f'transform="rotate(-90 16 {_MT + ph / 2:.1f})">{y_label}</text>')
    for si, (label, vals) in enumerate(series.items()):
        color = _COLORS[si % len(_COLORS)]
        pts = " ".join(f"{sx(i, len(vals)):.2f},{sy(v):.2f}"
                       for i, v in enumerate(vals))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{pts}"/>')
        ly = _MT + 14 + 16 * si
        out.append(f'<line x1="{_ML + pw - 120}" y1="{ly - 4}" '
                   f'x2="{_ML + pw - 96}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        out.append(f'<text x="{_ML + pw - 90}" y="{ly}" font-size="11" '
                   f'font-family="sans-serif">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def svg_bar_chart(path: str, bars: dict, title: str = "",
                  y_label: str = "") -> None:
    """Labeled vertical bars; bars maps label -> value."""
    _ensure_dir(path)
    vals = [float(v) for v in bars.values()]
    hi = max(vals + [0.0])
    lo = min(vals + [0.0])
    if hi == lo:
        hi = lo + 1.0
    pw = _W - _ML - _MR
    ph = _H - _MT - _MB
    n = max(len(bars), 1)
    slot = pw / n
    bw = slot * 0.6

    def sy(y):
        return _MT + (hi - float(y)) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
           f'height="{_H}" viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" '
           f'font-size="15" font-family="sans-serif">{title}</text>',
           f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" '
           f'stroke="black"/>',
           f'<line x1="{_ML}" y1="{sy(0):.1f}" x2="{_ML + pw}" '
           f'y2="{sy(0):.1f}" stroke="black"/>']
    for tv in _ticks(lo, hi):
        y = sy(tv)
        out.append(f'<text x="{_ML - 8}" y="{y + 4:.1f}" text-anchor="end" '
                   f'font-size="11" font-family="sans-serif">{tv:.3g}</text>')
    for i, (label, v) in enumerate(bars.items()):
        x = _ML + slot * i + (slot - bw) / 2
        top = sy(max(float(v), 0.0))
        height = abs(sy(float(v)) - sy(0.0))
        out.append(f'<rect x="{x:.1f}" y="{top:.1f}" width="{bw:.1f}" '
                   f'height="{height:.1f}" fill="{_COLORS[i % len(_COLORS)]}"/>')
        out.append(f'<text x="{x + bw / 2:.1f}" y="{_MT + ph + 18}" '
                   f'text-anchor="middle" font-size="11" '
                   f'font-family="sans-serif">{label}</text>')
        out.append(f'<text x="{x + bw / 2:.1f}" y="{top - 6:.1f}" '
                   f'text-anchor="middle" font-size="10" '
                   f'font-family="sans-serif">{float(v):.3g}</text>')
    out.append(f'<text x="16" y="{_MT + ph / 2:.1f}" text-anchor="middle" '
               f'font-size="12" font-family="sans-serif" '
               f'transform="rotate(-90 16 {_MT + ph / 2:.1f})">{y_label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
