"""KV-cache traffic simulation under cross-layer reuse."""
from .buffer import InvarianceBuffer, lookahead_update, retention_set
from .config import CALIBRATED_PAGE_MISS_PENALTY, BufferConfig, HbmConfig, KvGeometry, KvSimConfig
from .layout import POLICIES, KvLayout, LayoutError, map_tokens
from .schedule import LayoutBook, RoundSchedule, ScheduleError, check_rounds, schedule_attention
from .simulate import (CELLS, STANDARD_TRACE, BandwidthReport, SimulationPlan, calibrate_page_penalty,
                       plan_cells, reports_to_csv, simulate_sequence, standard_traces, with_penalty)
from .storage import StorageReport, kv_storage_accounting
from .trace import AccessTrace, TraceError, TraceParseError, TraceRecord, parse_trace, \
    read_trace, synthetic_trace, trace_from_mask, write_trace

__all__ = [n for n in dir() if not n.startswith("_")]
