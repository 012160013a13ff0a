"""Area embeddings from stay records, with anchored alignment across datasets."""

from .analysis import (
    ClusterAssignment,
    ClusterProfile,
    approximate_trend,
    cluster_profile,
    kmeanspp_cluster,
    resolve_embedding,
    similar_areas,
)
from .anchors import (
    AnchorSchedule,
    AnchorSet,
    Metric,
    ScheduleKind,
    anchoring_power,
    generate_anchor_set,
    misalignment,
    run_appendix_sweeps,
    run_validation_experiment,
    train_anchored,
)
from .errors import (
    AreavecError,
    ConfigError,
    DataError,
    DivergenceError,
    ParseError,
    UnsupportedRegionError,
)
from .mesh import (
    AreaRow,
    AreaTable,
    Geocode,
    MeshLevel,
    aggregate,
    decode_mesh,
    encode_mesh,
    parent_250m,
    read_area_table,
    write_area_table,
)
from .model import (
    EmbeddingModel,
    TrainConfig,
    approximation_loss,
    loss_and_gradients,
    predict_frequency,
    read_model,
    train,
    write_model,
)
from .stays import (
    DayType,
    HolidayCalendar,
    StayClass,
    StayRecord,
    class_label,
    discretize,
    read_stays,
    write_stays,
)
from .synth import ArchetypeSpec, SyntheticCity, generate, planted_city

__version__ = "0.1.0"
