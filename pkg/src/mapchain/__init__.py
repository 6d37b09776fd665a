"""Self-healing map data chain, desk scale.

Versioned layered map storage with change-only patches, electronic horizon
extraction over a most-probable-path heuristic, a bit-level frame codec on a
simulated lossy bus, horizon reconstruction, and a crowdsourced healing loop
that repairs the master map from vehicle observations.
"""

from .channel import Channel, ChannelConfig, RetransmitRequest, RetransmitScope
from .codec import (
    AdasisMessage,
    AttachmentMsg,
    Frame,
    FrameDecoder,
    FrameEncoder,
    GapEvent,
    MsgType,
    PositionMsg,
    ProfileMsg,
    SegmentMsg,
    StubMsg,
    decode_stream,
    dequantize_offset,
    encode_message,
    horizon_to_messages,
    quantize_offset,
)
from .healing import (
    CloudTier,
    DataMessage,
    DefinitionClass,
    Deviation,
    JobRequest,
    JobState,
    JobStatus,
    NoiseConfig,
    Observation,
    ServiceCloud,
    VehicleCloud,
    observe,
)
from .horizon import (
    Horizon,
    HorizonConfig,
    HorizonMode,
    Path,
    ProfileSpan,
    Stub,
    VehiclePosition,
    compute_mpp,
    extract_horizon,
    fit_profiles,
    transition_probability,
)
from .reconstructor import (
    HorizonReconstructor,
    build_horizon,
    compare_horizons,
    messages_to_horizon,
)
from .road import (
    RoadNetwork,
    RoadSegment,
    RouteType,
    build_network,
    curvature_at,
    generate_chain,
    generate_synthetic,
    successors,
)
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario
from .sim import FinalReport, TickMetrics, emit_csv, run
from .store import (
    BuildingBlock,
    ChangePatch,
    MapRecord,
    MapStore,
    RegionSnapshot,
    UpdateRegion,
    build_master_store,
    serialized_size,
)

__version__ = "0.1.0"
