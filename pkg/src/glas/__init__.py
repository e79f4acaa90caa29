"""Learned decentralised multi-robot motion policies with a provably safe barrier blend."""

from .expert import Dataset, DemoRecord, PlanningError, TrajectorySet, extract_demos, plan_global, read_dataset, write_dataset
from .observation import ObsCaps, Observation, encode, decode, observe, observe_all
from .policy import END_TO_END, TWO_STAGE, PolicyWeights, forward_controller, forward_pi, init_weights, load_weights, save_weights
from .safety import SafetyParams, SafetyViolation, default_params, safe_control_di, safe_control_si
from .sim import BarrierPolicy, NetworkPolicy, effort_of, evaluate_suite, rollout, success_of
from .training import TrainConfig, make_batches, train
from .world import DOUBLE, SINGLE, EnvInstance, InstanceInfeasible, collision_free, load_env, make_random_env, save_env

__version__ = "0.1.0"
