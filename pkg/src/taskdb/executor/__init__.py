"""Relational operators, batched inference, the embedding cache and plan execution."""

from taskdb.executor.cache import EmbeddingCache, content_key, embed_or_fetch
from taskdb.executor.engine import Channel, RunMetrics, default_stages, execute, pipeline_run
from taskdb.executor.operators import REL_ROW_SECONDS, Runtime, decode_output
from taskdb.executor.table import RowBatch, Table, load_table, load_tables, save_table
from taskdb.executor.window import WindowState, window_accumulate, window_cleanup, window_infer

__all__ = [
    "REL_ROW_SECONDS",
    "Channel",
    "EmbeddingCache",
    "RowBatch",
    "RunMetrics",
    "Runtime",
    "Table",
    "WindowState",
    "content_key",
    "decode_output",
    "default_stages",
    "embed_or_fetch",
    "execute",
    "load_table",
    "load_tables",
    "pipeline_run",
    "save_table",
    "window_accumulate",
    "window_cleanup",
    "window_infer",
]
