"""Class-token attention from the last encoder block as per-patch importance.

For each head the class-token row of the attention matrix is read without
its own column, leaving one score per patch; the head mean is the
importance.  Because the patching convolution mixes channels, one patch
maps to the same time span on every channel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .model import AttentionBundle, ModelParams, forward
from .signal_pipeline import CHANNELS, TARGET_FS, Segment

SVG_WIDTH = 1200
SVG_HEIGHT = 240


class PatchRange(NamedTuple):
    index: int
    start_sample: int
    end_sample: int  # inclusive
    start_time_s: float
    end_time_s: float
    importance: float


@dataclass
class ImportanceMap:
    scores: np.ndarray  # [patches]
    per_head: np.ndarray  # [heads, patches]
    segment_id: str = ""
    patch_size: int = 20
    fs: float = TARGET_FS

    @property
    def ranges(self) -> list[PatchRange]:
        return map_importance_to_samples(self.scores, self.patch_size, self.fs)


def extract_class_attention(bundle: AttentionBundle | np.ndarray, layer: int = -1) -> np.ndarray:
    """Class-token row of ``layer`` minus the class-token column: [heads, patches].

    A batched bundle gives [batch, heads, patches].
    """
    att = bundle.attention if isinstance(bundle, AttentionBundle) else np.asarray(bundle)
    n_layers = att.shape[-4]
    if not -n_layers <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range for {n_layers} layers")
    return att[..., layer, :, 0, 1:]


def head_average_importance(per_head: np.ndarray) -> np.ndarray:
    """Mean over the head axis (second to last)."""
    per_head = np.asarray(per_head, dtype=np.float64)
    return per_head.sum(axis=-2) / per_head.shape[-2]


def map_importance_to_samples(importance, patch_size: int = 20,
                              fs: float = TARGET_FS) -> list[PatchRange]:
    imp = np.asarray(importance, dtype=np.float64)
    dt = patch_size / fs
    return [PatchRange(i, i * patch_size, (i + 1) * patch_size - 1, i * dt, (i + 1) * dt,
                       float(imp[i])) for i in range(imp.size)]


def explain(params: ModelParams, x: np.ndarray, segment_id: str = "",
            layer: int = -1) -> ImportanceMap:
    """Eval-mode forward of one [4, samples] example and its importance map."""
    _, _, bundle = forward(params, np.asarray(x)[None], mode="eval")
    per_head = extract_class_attention(bundle[0], layer).astype(np.float64)
    return ImportanceMap(head_average_importance(per_head), per_head, segment_id,
                         params.config.patch_stride)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _g9(v: float) -> str:
    return f"{v:.9g}"


def write_importance_csv(imap: ImportanceMap, path) -> None:
    n_heads = imap.per_head.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_index", "start_sample", "end_sample", "start_time_s", "importance"]
                   + [f"head_{h}" for h in range(n_heads)])
        for r in imap.ranges:
            w.writerow([r.index, r.start_sample, r.end_sample, _g9(r.start_time_s),
                        _g9(r.importance)] + [_g9(v) for v in imap.per_head[:, r.index]])


def read_importance_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Importance vector and per-head matrix back from an overlay CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    heads = sorted((k for k in rows[0] if k.startswith("head_")), key=lambda k: int(k[5:]))
    imp = np.array([float(r["importance"]) for r in rows])
    per_head = np.array([[float(r[h]) for r in rows] for h in heads])
    return imp, per_head


def display_opacity(scores) -> np.ndarray:
    """Scores divided by the segment maximum (all zeros if the max is 0)."""
    s = np.asarray(scores, dtype=np.float64)
    top = s.max()
    return s / top if top > 0 else np.zeros_like(s)


def overlay_svg(signal: np.ndarray, imap: ImportanceMap, title: str = "",
                event_window: tuple[float, float] | None = None) -> str:
    signal = np.asarray(signal, dtype=np.float64)
    n = signal.size
    duration = n / imap.fs
    opacity = display_opacity(imap.scores)
    cell = SVG_WIDTH * imap.patch_size / n
    pad = 12
    lo, hi = float(signal.min()), float(signal.max())
    span = hi - lo or 1.0
    ys = SVG_HEIGHT - pad - (signal - lo) / span * (SVG_HEIGHT - 2 * pad)
    xs = np.arange(n) * SVG_WIDTH / n

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f"<title>{title}</title>",
        f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
    ]
    for i, o in enumerate(opacity):
        parts.append(
            f'<rect class="patch" data-index="{i}" x="{i * cell:.4f}" y="0" '
            f'width="{cell:.4f}" height="{SVG_HEIGHT}" fill="#b30000" fill-opacity="{o:.6g}"/>')
    if event_window is not None:
        x0 = event_window[0] / duration * SVG_WIDTH
        x1 = event_window[1] / duration * SVG_WIDTH
        parts.append(
            f'<rect class="event" x="{x0:.4f}" y="0" width="{x1 - x0:.4f}" height="{SVG_HEIGHT}" '
            f'fill="#1f5fbf" fill-opacity="0.25" stroke="#1f5fbf" stroke-dasharray="4 3"/>')
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    parts.append(f'<polyline class="signal" points="{points}" fill="none" '
                 f'stroke="#0044cc" stroke-width="1.2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_overlay(segment: Segment, imap: ImportanceMap,
                   channel_selection: Sequence[str] = ("RF",), out_dir=".",
                   stem: str | None = None) -> list[Path]:
    """Write ``<stem>_importance.csv`` and one ``<stem>_<channel>.svg`` per channel."""
    if imap.scores.size == 0:
        raise ValueError("empty importance")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{segment.subject_id}_{segment.index:04d}"
    written = [out / f"{stem}_importance.csv"]
    write_importance_csv(imap, written[0])
    for ch in channel_selection:
        if ch not in CHANNELS:
            raise ValueError(f"unknown channel {ch!r}")
        signal = segment.channel_data[CHANNELS.index(ch)]
        title = f"{stem} {ch} stage={segment.stage.name} apnea={segment.apnea.name}"
        path = out / f"{stem}_{ch}.svg"
        path.write_text(overlay_svg(signal, imap, title, segment.event_window), encoding="utf-8")
        written.append(path)
    return written
