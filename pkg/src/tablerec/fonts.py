"""Embedded 5x7 bitmap font for deterministic table rendering.

Rendering text through a system font stack would make pixel output (and the
tight text bounding boxes derived from it) depend on the host; a fixed
bitmap font keeps generated datasets byte-identical across platforms.
Glyph rows are strings of '1' (ink) and '0' over a 5-column cell.
"""

from __future__ import annotations

import numpy as np

GLYPH_W = 5
GLYPH_H = 7
ADVANCE = 6  # glyph width plus one column of spacing

_RAW = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    "a": ("00000", "00000", "01110", "00001", "01111", "10001", "01111"),
    "b": ("10000", "10000", "11110", "10001", "10001", "10001", "11110"),
    "c": ("00000", "00000", "01110", "10000", "10000", "10001", "01110"),
    "d": ("00001", "00001", "01111", "10001", "10001", "10001", "01111"),
    "e": ("00000", "00000", "01110", "10001", "11111", "10000", "01110"),
    "f": ("00110", "01001", "01000", "11100", "01000", "01000", "01000"),
    "g": ("00000", "01111", "10001", "10001", "01111", "00001", "01110"),
    "h": ("10000", "10000", "11110", "10001", "10001", "10001", "10001"),
    "i": ("00100", "00000", "01100", "00100", "00100", "00100", "01110"),
    "j": ("00010", "00000", "00110", "00010", "00010", "10010", "01100"),
    "k": ("10000", "10000", "10010", "10100", "11000", "10100", "10010"),
    "l": ("01100", "00100", "00100", "00100", "00100", "00100", "01110"),
    "m": ("00000", "00000", "11010", "10101", "10101", "10101", "10101"),
    "n": ("00000", "00000", "11110", "10001", "10001", "10001", "10001"),
    "o": ("00000", "00000", "01110", "10001", "10001", "10001", "01110"),
    "p": ("00000", "11110", "10001", "10001", "11110", "10000", "10000"),
    "q": ("00000", "01111", "10001", "10001", "01111", "00001", "00001"),
    "r": ("00000", "00000", "10110", "11001", "10000", "10000", "10000"),
    "s": ("00000", "00000", "01111", "10000", "01110", "00001", "11110"),
    "t": ("01000", "01000", "11100", "01000", "01000", "01001", "00110"),
    "u": ("00000", "00000", "10001", "10001", "10001", "10011", "01101"),
    "v": ("00000", "00000", "10001", "10001", "10001", "01010", "00100"),
    "w": ("00000", "00000", "10001", "10001", "10101", "10101", "01010"),
    "x": ("00000", "00000", "10001", "01010", "00100", "01010", "10001"),
    "y": ("00000", "10001", "10001", "10001", "01111", "00001", "01110"),
    "z": ("00000", "00000", "11111", "00010", "00100", "01000", "11111"),
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
    ",": ("00000", "00000", "00000", "00000", "01100", "00100", "01000"),
    "-": ("00000", "00000", "00000", "11111", "00000", "00000", "00000"),
    "%": ("11000", "11001", "00010", "00100", "01000", "10011", "00011"),
    "(": ("00010", "00100", "01000", "01000", "01000", "00100", "00010"),
    ")": ("01000", "00100", "00010", "00010", "00010", "00100", "01000"),
    " ": ("00000", "00000", "00000", "00000", "00000", "00000", "00000"),
}


def _compile():
    glyphs = {}
    ink = {}
    for ch, rows in _RAW.items():
        if len(rows) != GLYPH_H or any(len(r) != GLYPH_W for r in rows):
            raise ValueError(f"malformed glyph {ch!r}")
        bitmap = np.array([[c == "1" for c in row] for row in rows], dtype=bool)
        glyphs[ch] = bitmap
        ys, xs = np.nonzero(bitmap)
        if len(xs):
            ink[ch] = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        else:
            ink[ch] = None
    return glyphs, ink


GLYPHS, INK_BOUNDS = _compile()

ALPHABET = "".join(sorted(GLYPHS))


def has_glyph(ch: str) -> bool:
    return ch in GLYPHS


def text_ink_bbox(text: str, x: int, y: int, scale: int = 1):
    """Tight pixel bbox [x0, y0, x1, y1) of the ink of ``text`` drawn at (x, y).

    Returns None when the text has no ink (empty or all spaces).
    """
    x0 = y0 = None
    x1 = y1 = None
    cx = x
    for ch in text:
        b = INK_BOUNDS.get(ch)
        if b is not None:
            gx0, gy0, gx1, gy1 = b
            cx0, cy0 = cx + gx0 * scale, y + gy0 * scale
            cx1, cy1 = cx + gx1 * scale, y + gy1 * scale
            x0 = cx0 if x0 is None else min(x0, cx0)
            y0 = cy0 if y0 is None else min(y0, cy0)
            x1 = cx1 if x1 is None else max(x1, cx1)
            y1 = cy1 if y1 is None else max(y1, cy1)
        cx += ADVANCE * scale
    if x0 is None:
        return None
    return [float(x0), float(y0), float(x1), float(y1)]


def draw_text(canvas: np.ndarray, text: str, x: int, y: int, scale: int = 1, value: int = 0) -> None:
    """Blit ``text`` onto a uint8 (h, w) canvas; pixels outside are clipped."""
    h, w = canvas.shape
    cx = x
    for ch in text:
        bitmap = GLYPHS.get(ch)
        if bitmap is not None:
            ys, xs = np.nonzero(bitmap)
            for dy, dx in zip(ys, xs):
                py0 = y + dy * scale
                px0 = cx + dx * scale
                py1, px1 = min(py0 + scale, h), min(px0 + scale, w)
                if py0 < h and px0 < w and py1 > max(py0, 0) and px1 > max(px0, 0):
                    canvas[max(py0, 0):py1, max(px0, 0):px1] = value
        cx += ADVANCE * scale
