from .layer import LayerTrace, gumbel_layer_forward, routed_layer_forward
from .network import (
    ForwardResult,
    GumbelSettings,
    ThresholdCalibration,
    calibrate_threshold,
    network_forward,
)
from .routers import (
    GumbelSample,
    RouteMode,
    RouterDecision,
    RouterParams,
    aux_capacity_loss,
    get_router,
    gumbel_router_forward,
    init_routers,
    route_threshold,
    route_topk,
    router_names,
    select_topk,
)
from .dump import write_score_csv
