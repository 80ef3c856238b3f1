"""Securebox — edge gateways backed by a cloud security service, simulated."""

from .chain import ChainVerdict, MiddleboxManager, ServiceChain
from .cloud import CloudConfig, CloudService, LowActivitySchedule
from .config import ScenarioConfig, load_config, load_from_yaml
from .detector import PortScanDetector
from .errors import ConfigInvalid, SecureboxError
from .framing import FrameReader
from .gateway import CloudPending, Release, Securebox
from .metrics import MetricsSeries, compare, export_csv, load_csv
from .middlebox import DpiConfig, FirewallConfig, FirewallRule, IdsConfig, Middlebox
from .policy_db import PolicyDb
from .replication import failover
from .sim import SimResult, Simulation, replay_check, run_scenario, simulate
from .snapshot import restore, snapshot
from .snapshot_sqlite import SqliteSnapshotStore
from .trust import CertificateAuthority, KeyPair, TrustAnchor
from .types import (
    AnalysisRequest, AnalysisResponse, FlowMetadata, MatchPattern, PolicyUpdate,
    SecurityPolicy, UserProfile, Verdict,
)

__all__ = [
    "Securebox", "CloudPending", "Release",
    "CloudService", "CloudConfig", "LowActivitySchedule", "failover",
    "PolicyDb", "snapshot", "restore", "SqliteSnapshotStore",
    "MiddleboxManager", "ServiceChain", "ChainVerdict",
    "Middlebox", "FirewallConfig", "FirewallRule", "IdsConfig", "DpiConfig",
    "PortScanDetector",
    "CertificateAuthority", "KeyPair", "TrustAnchor",
    "FrameReader",
    "ScenarioConfig", "load_config", "load_from_yaml",
    "Simulation", "SimResult", "simulate", "run_scenario", "replay_check",
    "MetricsSeries", "export_csv", "load_csv", "compare",
    "FlowMetadata", "MatchPattern", "SecurityPolicy", "Verdict",
    "AnalysisRequest", "AnalysisResponse", "PolicyUpdate", "UserProfile",
    "SecureboxError", "ConfigInvalid",
]
__version__ = "0.1.0"
