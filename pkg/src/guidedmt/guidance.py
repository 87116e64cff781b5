"""Binary guidance matrices gating cross-modal self-attention.

The encoder input is laid out as ``[text (T) | local boxes (N) | global (1)]``.
Text attends to all text, boxes attend to all boxes, the global image vector
is visible to and sees every position, and a text position may attend to a
box (and vice versa) only if an alignment record links them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """An input record violates its schema or layout."""


@dataclass(frozen=True)
class AlignmentRecord:
    """Links text positions ``[token_start, token_end)`` to local box ``box_index``."""

    token_start: int
    token_end: int
    box_index: int

    def validate(self, n_text: int, n_local: int) -> None:
        if not (0 <= self.token_start < self.token_end <= n_text):
            raise ValidationError(f"{self}: token span outside [0, {n_text})")
        if not (0 <= self.box_index < n_local):
            raise ValidationError(f"{self}: box index outside [0, {n_local})")


@dataclass(frozen=True)
class Layout:
    """Position spans of the concatenated encoder sequence."""

    n_text: int
    n_local: int
    has_global: bool = True

    @property
    def size(self) -> int:
        return self.n_text + self.n_local + int(self.has_global)

    @property
    def text(self) -> slice:
        return slice(0, self.n_text)

    @property
    def local(self) -> slice:
        return slice(self.n_text, self.n_text + self.n_local)

    @property
    def global_index(self) -> int | None:
        return self.size - 1 if self.has_global else None


@dataclass
class GuidanceMatrix:
    matrix: np.ndarray
    layout: Layout
    alignments: tuple[AlignmentRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=bool)
        S = self.layout.size
        if self.matrix.shape != (S, S):
            raise ValidationError(f"guidance matrix shape {self.matrix.shape} != layout size {S}")
        if not self.matrix.any(axis=1).all():
            raise ValidationError("guidance matrix has a row with no allowed position")

    @property
    def size(self) -> int:
        return self.layout.size

    def is_symmetric(self) -> bool:
        return bool((self.matrix == self.matrix.T).all())


def build_guidance(n_text: int, n_local: int, alignments: Iterable[AlignmentRecord] = (),
                   has_global: bool = True) -> GuidanceMatrix:
    """Construct C from alignment links; symmetric by construction."""
    alignments = tuple(alignments)
    for rec in alignments:
        rec.validate(n_text, n_local)
    layout = Layout(n_text, n_local, has_global)
    S = layout.size
    C = np.zeros((S, S), dtype=bool)
    C[layout.text, layout.text] = True
    C[layout.local, layout.local] = True
    if has_global:
        C[S - 1, :] = True
        C[:, S - 1] = True
    for rec in alignments:
        box = n_text + rec.box_index
        C[rec.token_start:rec.token_end, box] = True
        C[box, rec.token_start:rec.token_end] = True
    return GuidanceMatrix(C, layout, alignments)


DEGRADE_MODES = ("full", "drop-local", "drop-global", "text-only")


def degrade_guidance(C: GuidanceMatrix, mode: str) -> GuidanceMatrix:
    """Ablated guidance.

    ``full`` keeps the layout and allows everything; the ``drop-*`` and
    ``text-only`` modes remove positions from the layout altogether.
    """
    lay = C.layout
    if mode == "full":
        return GuidanceMatrix(np.ones((lay.size, lay.size), dtype=bool), lay, C.alignments)
    if mode == "drop-local":
        return build_guidance(lay.n_text, 0, (), lay.has_global)
    if mode == "drop-global":
        return build_guidance(lay.n_text, lay.n_local, C.alignments, has_global=False)
    if mode == "text-only":
        return build_guidance(lay.n_text, 0, (), has_global=False)
    raise ValueError(f"unknown guidance mode {mode!r}; expected one of {DEGRADE_MODES}")


def sever_visual(C: GuidanceMatrix) -> GuidanceMatrix:
    """Zero every text<->visual entry while keeping the layout.

    Text rows then see only text; visual rows keep their own block plus the
    global row, so the matrix stays free of degenerate rows.
    """
    lay = C.layout
    M = C.matrix.copy()
    M[lay.text, lay.n_text:] = False
    M[lay.n_text:, lay.text] = False
    return GuidanceMatrix(M, lay, ())


# ---------------------------------------------------------------------------
# Alignment file: ``example_id<TAB>token_start<TAB>token_end<TAB>box_index``
# ---------------------------------------------------------------------------

def write_alignment_file(path: str | Path, records: Iterable[tuple[str, AlignmentRecord]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# example_id\ttoken_start\ttoken_end\tbox_index\n")
        for example_id, rec in records:
            fh.write(f"{example_id}\t{rec.token_start}\t{rec.token_end}\t{rec.box_index}\n")


def read_alignment_file(path: str | Path) -> dict[str, list[AlignmentRecord]]:
    out: dict[str, list[AlignmentRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                start, end, box = (int(p) for p in parts[1:])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: non-integer field") from exc
            out.setdefault(parts[0], []).append(AlignmentRecord(start, end, box))
    return out


def alignments_from_rows(rows: Sequence[Sequence[int]]) -> tuple[AlignmentRecord, ...]:
    return tuple(AlignmentRecord(int(a), int(b), int(c)) for a, b, c in rows)
