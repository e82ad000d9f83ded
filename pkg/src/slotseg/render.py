"""Static panel rendering of per-frame decompositions.

Each panel tiles rows (rgb, depth, mask, position) against columns (input,
composed prediction, background, then one column per occupied slot).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .composer import ComposedScene
from .core import SlotDecodeResult, SlotState

MARGIN = 2


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _gray_rgb(plane: torch.Tensor) -> np.ndarray:
    arr = plane.detach().cpu().numpy()
    if arr.ndim == 3:
        arr = arr[0]
    return np.repeat(_to_uint8(arr)[..., None], 3, axis=2)


def _rgb(img: torch.Tensor) -> np.ndarray:
    return _to_uint8(img.detach().cpu().numpy().transpose(1, 2, 0))


def render_panel(
    input_rgb: torch.Tensor,
    input_depth: torch.Tensor | None,
    scene: ComposedScene,
    decodes: list[SlotDecodeResult],
    states: list[SlotState],
    bg_rgb: torch.Tensor,
    bg_depth: torch.Tensor,
) -> Image.Image:
    h, w = input_rgb.shape[1], input_rgb.shape[2]
    blank = np.zeros((h, w, 3), dtype=np.uint8)
    depth_cell = _gray_rgb(input_depth) if input_depth is not None else blank
    columns = [
        [_rgb(input_rgb), depth_cell, blank, blank],
        [_rgb(scene.rgb), _gray_rgb(scene.depth), _gray_rgb(1.0 - scene.background_weight), blank],
        [_rgb(bg_rgb), _gray_rgb(bg_depth), _gray_rgb(scene.background_weight), blank],
    ]
    for state, dec in zip(states, decodes):
        if not state.occupied:
            continue
        columns.append(
            [_rgb(dec.rgb), _gray_rgb(dec.depth), _gray_rgb(dec.raw_mask), _gray_rgb(dec.position_map)]
        )
    rows, cols = 4, len(columns)
    canvas = np.full(
        (rows * h + (rows + 1) * MARGIN, cols * w + (cols + 1) * MARGIN, 3),
        32,
        dtype=np.uint8,
    )
    for c, column in enumerate(columns):
        for r, cell in enumerate(column):
            y = MARGIN + r * (h + MARGIN)
            x = MARGIN + c * (w + MARGIN)
            canvas[y : y + h, x : x + w] = cell
    return Image.fromarray(canvas, mode="RGB")


def render_sequence_panels(result, frames, out_dir) -> list[Path]:
    """Write panel_%04d.png per frame from an inference SequenceResult."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, scene in enumerate(result.scenes):
        rgb, depth, _ = frames[min(t, len(frames) - 1)]
        bg_rgb, bg_depth = result.backgrounds[t]
        panel = render_panel(
            rgb, depth, scene, result.decodes[t], result.states[t],
            bg_rgb=bg_rgb, bg_depth=bg_depth,
        )
        path = out_dir / f"panel_{t:04d}.png"
        panel.save(path)
        paths.append(path)
    return paths
