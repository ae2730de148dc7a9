"""Transformer inference with compressible KV caches.

The engine keeps per-head key/value stores that scoring policies can shrink,
either once after the prompt is processed or periodically while decoding.
The headline policy estimates each cached pair's future attention from a
Gaussian model of upcoming queries; classic baselines (key norms, sink
windows, past-attention ranking, key diversity) share the same interface.
"""

from .cache import KvCache, KvEntry, memory_bytes
from .container import (
    BadMagicError,
    ContainerError,
    ExtentMismatchError,
    MissingTensorError,
    TruncatedFileError,
    read_kvt,
    write_kvt,
)
from .controller import (
    CompressionConfig,
    CompressionEvent,
    DecodingCompressor,
    compress_prefill,
    score_head,
    write_event_log,
)
from .model import (
    AttentionTrace,
    Model,
    ModelConfig,
    PositionOverflowError,
    greedy_decode,
    load_model,
    random_model,
    save_model,
)
from .policies import (
    POLICY_IDS,
    allocate_head_adaptive,
    score_expected_attention,
    score_keydiff,
    score_knorm,
    score_oracle,
    score_random,
    score_snapkv,
    score_streaming,
    score_tova,
    top_k_keep,
    value_weights,
)
from .stats import (
    QueryRing,
    QueryStats,
    RunningMoments,
    expected_log_score,
    expected_log_scores,
    finalize_moments,
    mgf_oracle,
    update_moments,
)
from .tensorops import (
    AveragedRope,
    RopeTable,
    ShapeError,
    apply_rope,
    averaged_rope,
    averaged_rope_matrix,
    matmul,
    rotate_rows,
    softmax_rows,
)

__version__ = "0.1.0"
