"""Deterministic virtual-time simulation of asynchronous SGD variants.

The package couples an exact event-driven timeline for heterogeneous
workers with table-based asynchronous servers (ringleader scheduling,
batched baselines) and an auditing layer that replays every recorded run
from its event log to re-derive the logged quantities independently.
"""
from .algorithms import (
    METHODS,
    DivergenceError,
    IA2SGDServer,
    MaleniaServer,
    MinibatchServer,
    RingleaderServer,
    RingleaderUniversalServer,
    Server,
    StoppingRule,
    all_workers_once,
    harmonic_mean,
    make_server,
    malenia_condition,
    predicted_iterations,
    theory_stepsize,
)
from .audit import (
    Finding,
    adversarial_roleswitch_profiles,
    audit_trace_dir,
    check_conservation,
    check_convergence,
    check_delay_bound,
    check_round_timing,
    check_t_sequence_bound,
    check_variance_surrogate,
    fit_time_complexity,
    replay_events,
    report,
    t_sequence,
    time_to_epsilon,
    verify_replay,
)
from .problems import (
    ConfigurationError,
    DirichletPartition,
    Problem,
    QuadraticEnsemble,
    SoftmaxClassification,
    dirichlet_partition,
    make_quadratic,
    make_softmax_classification,
    verify_smoothness_ordering,
)
from .runner import (
    RunConfig,
    __version__,
    load_config,
    run_experiment,
    run_to_dir,
    sweep_experiment,
    write_run,
)
from .timeline import (
    DeadlockError,
    FixedProfile,
    GradientEvent,
    Horizon,
    UniversalProfile,
    completion_count,
    power_integral,
    run_event_loop,
    time_for_units,
)
from .trace import (
    CSV_COLUMNS,
    EventRecord,
    IterationRecord,
    RunTrace,
    config_fingerprint,
    read_events_csv,
    read_metadata,
    read_trace_csv,
    write_events_csv,
    write_metadata,
    write_trace_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]
