"""Three-phase batched inference state: accumulate rows, infer a stacked batch, release."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from taskdb.errors import ShapeMismatch
from taskdb.tensor import Mvec


@dataclass
class WindowState:
    batch_size: int
    rows: list = field(default_factory=list)      # raw rows awaiting inference
    values: list = field(default_factory=list)    # the model input of each row
    results: list = field(default_factory=list)
    filled: bool = False
    start_index: int = 0        # stream position of rows[0], for error attribution
    emitted: int = 0
    batches: int = 0
    elapsed: float = 0.0
    last_stacked_shape: tuple | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


_ROW = object()


def window_accumulate(state: WindowState, row, value=_ROW) -> list | None:
    """Copy a row into the window; returns the pending rows once the batch is full.

    ``value`` is the row's model input and defaults to the row itself; an
    explicit None (a NULL input) is kept as None.
    """
    state.rows.append(row)
    state.values.append(row if value is _ROW else value)
    if len(state.rows) >= state.batch_size:
        state.filled = True
        return list(state.rows)
    return None


def conform(inputs: Sequence[Mvec], shape: tuple | None, start_index: int = 0) -> list[Mvec]:
    """Bring each input to ``shape`` (a same-size reshape is allowed); otherwise name the row."""
    out = []
    ref = shape if shape is not None else (inputs[0].shape if inputs else None)
    size = int(np.prod(ref)) if ref is not None else 0
    for i, m in enumerate(inputs):
        if not isinstance(m, Mvec):
            raise ShapeMismatch(f"row {start_index + i}: model input must be a tensor, got {type(m).__name__}")
        if m.shape == ref:
            out.append(m)
        elif shape is not None and m.size == size:
            out.append(Mvec(ref, m.data))
        else:
            raise ShapeMismatch(f"row {start_index + i} has shape {list(m.shape)}, expected {list(ref)}")
    return out


def window_infer(state: WindowState, model, device, convert: Callable | None = None) -> None:
    """Convert pending rows, stack them on a leading batch axis and run the model.

    ``model`` provides ``input_shape`` and ``run(stacked, device) -> (outputs, seconds)``.
    Rows whose input converts to None (a NULL value) skip the model and get a
    None result.
    """
    if not state.rows:
        state.results = []
        return
    inputs = convert(state.values) if convert is not None else list(state.values)
    live = [i for i, m in enumerate(inputs) if m is not None]
    results = [None] * len(inputs)
    if live:
        # a shapeless (remote) model takes the first live row's shape as the reference
        shape = model.input_shape
        strict = shape is None
        if strict and isinstance(inputs[live[0]], Mvec):
            shape = inputs[live[0]].shape
        conformed = []
        for i in live:   # one by one so errors name the stream position
            m = inputs[i]
            if strict and isinstance(m, Mvec) and m.shape != shape:
                raise ShapeMismatch(f"row {state.start_index + i} has shape {list(m.shape)}, "
                                    f"expected {list(shape)}")
            conformed.extend(conform([m], shape, state.start_index + i))
        stacked = np.stack([m.to_array() for m in conformed])
        state.last_stacked_shape = stacked.shape
        outputs, elapsed = model.run(stacked, device)
        if len(outputs) != len(live):
            raise ShapeMismatch(f"model returned {len(outputs)} rows for a batch of {len(live)}")
        for i, out in zip(live, outputs):
            results[i] = out
        state.elapsed += elapsed
        state.batches += 1
    state.results = results


def window_cleanup(state: WindowState) -> list:
    """Release the raw rows; returns ``(row, result)`` pairs in input order."""
    emitted = list(zip(state.rows, state.results))
    state.emitted += len(emitted)
    state.start_index += len(state.rows)
    state.rows = []
    state.values = []
    state.results = []
    state.filled = False
    return emitted
