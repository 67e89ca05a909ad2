"""Flat parameter vectors with a named layout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass
class ParamLayout:
    segments: list[Segment] = field(default_factory=list)

    def add(self, name: str, shape) -> Segment:
        if name in self:
            raise ValueError(f"duplicate parameter segment {name!r}")
        seg = Segment(name, self.size, tuple(int(s) for s in shape))
        self.segments.append(seg)
        return seg

    @property
    def size(self) -> int:
        return self.segments[-1].offset + self.segments[-1].size if self.segments else 0

    def __contains__(self, name) -> bool:
        return any(s.name == name for s in self.segments)

    def __getitem__(self, name) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def segment_at(self, index: int) -> Segment:
        for s in self.segments:
            if s.offset <= index < s.offset + s.size:
                return s
        raise IndexError(index)

    def to_json(self) -> list:
        return [{"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in self.segments]

    @classmethod
    def from_json(cls, items) -> "ParamLayout":
        layout = cls()
        for it in items:
            seg = layout.add(it["name"], it["shape"])
            if seg.offset != it["offset"]:
                raise ValueError(f"layout offset mismatch for {it['name']!r}")
        return layout


@dataclass
class Params:
    """Parameter vector plus its layout."""

    vector: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (self.layout.size,):
            raise ValueError(f"vector has {self.vector.size} entries, layout needs {self.layout.size}")

    def __getitem__(self, name) -> np.ndarray:
        seg = self.layout[name]
        return self.vector[seg.slice].reshape(seg.shape)

    def copy(self) -> "Params":
        return Params(self.vector.copy(), self.layout)

    def view(self) -> "ParamView":
        return ParamView({s.name: self[s.name] for s in self.layout.segments})

    def bind(self, tape: ad.Tape) -> tuple["ParamView", ad.Tensor]:
        """Record the vector as one leaf; segments become differentiable slices."""
        leaf = tape.leaf(self.vector)
        tensors = {}
        for s in self.layout.segments:
            tensors[s.name] = ad.reshape(leaf[s.slice], s.shape)
        return ParamView(tensors), leaf


class ParamView(dict):
    """Mapping from segment name to array or tensor."""
