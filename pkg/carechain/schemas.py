import math
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from carechain import defaults
from carechain.netsim import EnergyCosts, LinkClass

N_FEATURES = 8
N_WEIGHTS = N_FEATURES + 1

# Clamp ranges for emitted vitals.
VITAL_RANGES: Dict[str, Tuple[float, float]] = {
    "heart_rate": (20.0, 250.0),
    "systolic": (50.0, 260.0),
    "diastolic": (30.0, 160.0),
    "spo2": (50.0, 100.0),
    "ecg_amp": (0.0, 5.0),
}

TRACKED_VITALS = ("heart_rate", "systolic", "spo2", "ecg_amp")

CHRONIC_HR_THRESHOLD = 85.0
CHRONIC_SYSTOLIC_THRESHOLD = 140.0


def _all_finite(values: List[float]) -> bool:
    return all(math.isfinite(v) for v in values)


# ---------------------------------------------------------------------------
# Telemetry
# ---------------------------------------------------------------------------


class VitalsSample(BaseModel):
    """One multi-vital reading from a patient's sensor bundle."""
    model_config = ConfigDict(frozen=True)

    patient_id: str
    t_ms: int = Field(..., ge=0, description="Simulation time in milliseconds.")
    heart_rate: float = Field(..., ge=20, le=250, description="Beats per minute.")
    systolic: float = Field(..., ge=50, le=260, description="mmHg.")
    diastolic: float = Field(..., ge=30, le=160, description="mmHg.")
    spo2: float = Field(..., ge=50, le=100, description="Percent oxygen saturation.")
    ecg_amp: float = Field(..., ge=0, le=5, description="Unitless ECG feature amplitude.")

    @model_validator(mode="after")
    def check_pressure_order(self):
        if not self.diastolic < self.systolic:
            raise ValueError(f"diastolic ({self.diastolic}) must be below systolic ({self.systolic})")
        return self


class PatientProfile(BaseModel):
    """Baseline vitals of one synthetic patient."""
    model_config = ConfigDict(frozen=True)

    patient_id: str
    hr_mean: float
    hr_sd: float = Field(..., ge=0)
    systolic_mean: float
    systolic_sd: float = Field(..., ge=0)
    diastolic_mean: float
    diastolic_sd: float = Field(..., ge=0)
    spo2_mean: float
    spo2_sd: float = Field(..., ge=0)
    ecg_mean: float = 1.0
    ecg_sd: float = Field(0.0, ge=0)
    sample_period_ms: int = Field(1000, ge=1)
    phase_ms: int = Field(0, ge=0, description="Offset of the first sample; t_ms = phase_ms + i * sample_period_ms.")

    @model_validator(mode="after")
    def check_phase(self):
        if self.phase_ms >= self.sample_period_ms:
            raise ValueError("phase_ms must be smaller than sample_period_ms")
        return self

    @computed_field
    @property
    def chronic_risk_label(self) -> int:
        """1 when the baseline heart rate or systolic pressure exceeds the chronic-risk thresholds."""
        return int(self.hr_mean > CHRONIC_HR_THRESHOLD or self.systolic_mean > CHRONIC_SYSTOLIC_THRESHOLD)


class AnomalyKind(str, Enum):
    TACHYCARDIA = "tachycardia"
    HYPOTENSION = "hypotension"
    DESATURATION = "desaturation"
    ARRHYTHMIA = "arrhythmia"


# Vital scaled by each injection kind.
INJECTION_TARGETS: Dict[AnomalyKind, str] = {
    AnomalyKind.TACHYCARDIA: "heart_rate",
    AnomalyKind.HYPOTENSION: "systolic",
    AnomalyKind.DESATURATION: "spo2",
    AnomalyKind.ARRHYTHMIA: "ecg_amp",
}


class AnomalyInjection(BaseModel):
    model_config = ConfigDict(frozen=True)

    patient_id: Optional[str] = Field(None, description="Target patient when loaded from a scenario config.")
    kind: AnomalyKind
    start_ms: int = Field(..., ge=0)
    duration_ms: int = Field(..., gt=0)
    magnitude: float = Field(..., gt=0, description="Multiplicative factor on the affected vital.")

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.duration_ms

    def covers(self, t_ms: int) -> bool:
        return self.start_ms <= t_ms < self.end_ms


# ---------------------------------------------------------------------------
# Edge
# ---------------------------------------------------------------------------


class FeatureVector(BaseModel):
    """(median, robust z) for heart_rate, systolic, spo2 and ecg_amp, interleaved."""
    model_config = ConfigDict(frozen=True)

    patient_id: str
    window_end_ms: int
    values: List[float]

    @field_validator("values")
    def check_values(cls, v):
        if len(v) != N_FEATURES:
            raise ValueError(f"feature vector must have exactly {N_FEATURES} values, got {len(v)}")
        if not _all_finite(v):
            raise ValueError("feature values must be finite")
        return v

    @property
    def z_scores(self) -> Dict[str, float]:
        return {vital: self.values[2 * i + 1] for i, vital in enumerate(TRACKED_VITALS)}


class AnomalyVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    patient_id: str
    window_end_ms: int
    flagged: bool
    score: float = Field(..., description="Max absolute robust z across tracked vitals.")
    threshold: float = Field(..., gt=0)
    triggering_vital: Optional[str] = None

    @model_validator(mode="after")
    def check_flag(self):
        if self.flagged != (self.score > self.threshold):
            raise ValueError("flagged must hold exactly when score > threshold")
        if self.flagged and self.triggering_vital is None:
            raise ValueError("flagged verdicts must name the triggering vital")
        return self


class Alert(BaseModel):
    model_config = ConfigDict(frozen=True)

    patient_id: str
    created_ms: int
    verdict: AnomalyVerdict
    edge_node_id: str

    @field_validator("verdict")
    def check_flagged(cls, v):
        if not v.flagged:
            raise ValueError("alerts can only be built from flagged verdicts")
        return v


# ---------------------------------------------------------------------------
# Federated learning
# ---------------------------------------------------------------------------


class GlobalModel(BaseModel):
    """Logistic-regression model: 8 feature weights followed by the bias."""
    model_config = ConfigDict(frozen=True)

    round: int = Field(0, ge=0)
    weights: List[float] = Field(default_factory=lambda: [0.0] * N_WEIGHTS)

    @field_validator("weights")
    def check_weights(cls, v):
        if len(v) != N_WEIGHTS:
            raise ValueError(f"model must have exactly {N_WEIGHTS} weights, got {len(v)}")
        if not _all_finite(v):
            raise ValueError("model weights must be finite")
        return v


class DpParams(BaseModel):
    """Gaussian-mechanism parameters for one round."""
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(..., gt=0)
    delta_p: float = Field(..., gt=0, lt=1)
    clip_norm: float = Field(..., gt=0)
    sigma: float = Field(..., ge=0)

    @staticmethod
    def gaussian_sigma(epsilon: float, delta_p: float, clip_norm: float) -> float:
        return clip_norm * math.sqrt(2 * math.log(1.25 / delta_p)) / epsilon

    @classmethod
    def from_budget(cls, epsilon: float, delta_p: float, clip_norm: float) -> "DpParams":
        return cls(epsilon=epsilon, delta_p=delta_p, clip_norm=clip_norm,
                   sigma=cls.gaussian_sigma(epsilon, delta_p, clip_norm))

    @model_validator(mode="after")
    def check_sigma(self):
        expected = self.gaussian_sigma(self.epsilon, self.delta_p, self.clip_norm)
        if abs(self.sigma - expected) > 1e-9:
            raise ValueError(f"sigma {self.sigma} does not match the Gaussian mechanism ({expected})")
        return self


class ModelUpdate(BaseModel):
    model_config = ConfigDict(frozen=True)

    node_id: str
    round: int = Field(..., ge=0)
    delta: List[float]
    sample_count: int = Field(..., gt=0)
    clipped: bool = False
    clip_norm: Optional[float] = Field(None, gt=0, description="Bound applied by clip().")
    dp: Optional[DpParams] = None
    train_loss: Optional[float] = Field(None, description="Mean local training loss after the last epoch.")

    @field_validator("delta")
    def check_delta(cls, v):
        if len(v) != N_WEIGHTS:
            raise ValueError(f"delta must have exactly {N_WEIGHTS} values, got {len(v)}")
        if not _all_finite(v):
            raise ValueError("delta values must be finite")
        return v

    @model_validator(mode="after")
    def check_clip(self):
        if self.clipped:
            if self.clip_norm is None:
                raise ValueError("clipped updates must record their clip_norm")
            # The bound is checkable until noise is added.
            if self.dp is None and math.sqrt(sum(d * d for d in self.delta)) > self.clip_norm + 1e-9:
                raise ValueError("clipped delta exceeds its clip_norm")
        return self


class LocalDataset(BaseModel):
    node_id: str
    rows: List[Tuple[List[float], int]]

    @field_validator("rows")
    def check_rows(cls, v):
        if not v:
            raise ValueError("local dataset must not be empty")
        for features, label in v:
            if len(features) != N_FEATURES:
                raise ValueError(f"each row must carry {N_FEATURES} features")
            if label not in (0, 1):
                raise ValueError("labels must be 0 or 1")
        return v


# ---------------------------------------------------------------------------
# Access control
# ---------------------------------------------------------------------------

AttrPredicate = Dict[str, Union[str, List[str]]]


class Action(str, Enum):
    READ = "read"
    WRITE = "write"
    AGGREGATE = "aggregate"


class Effect(str, Enum):
    PERMIT = "permit"
    DENY = "deny"


class Principal(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    attributes: Dict[str, str] = Field(default_factory=dict)
    key_ref: Optional[str] = Field(None, description="Identity-registry entry holding the public key; defaults to id.")

    @property
    def registry_id(self) -> str:
        return self.key_ref or self.id


class Policy(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    priority: int = 0
    subject: AttrPredicate = Field(default_factory=dict, description="Conjunction over principal attributes.")
    resource: AttrPredicate = Field(default_factory=dict, description="Conjunction over resource attributes.")
    action: Action
    effect: Effect
    requires_consent: bool = False


class ConsentRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    patient_id: str
    grantee: Union[str, AttrPredicate] = Field(..., description="Principal id or attribute predicate.")
    scope: List[str] = Field(..., description="Resource kinds covered by the grant.")
    granted_ms: int = Field(..., ge=0)
    revoked_ms: Optional[int] = None

    @model_validator(mode="after")
    def check_revocation(self):
        if self.revoked_ms is not None and self.revoked_ms <= self.granted_ms:
            raise ValueError("revoked_ms must be later than granted_ms")
        return self


class AccessDecision(BaseModel):
    model_config = ConfigDict(frozen=True)

    permit: bool
    matched_policy: Optional[str] = None
    consent_checked: bool = False
    trace: List[str] = Field(default_factory=list, description="Policy ids in evaluation order.")

    @model_validator(mode="after")
    def check_default_deny(self):
        if self.permit and self.matched_policy is None:
            raise ValueError("a permit must name the policy that granted it")
        return self


class Notification(BaseModel):
    model_config = ConfigDict(frozen=True)

    alert_id: str
    provider_id: str
    patient_id: str
    created_ms: float


class DecisionRecord(BaseModel):
    """One access evaluation made while executing a committed transaction."""
    model_config = ConfigDict(frozen=True)

    t_ms: float
    principal: str
    resource: str
    resource_attrs: Dict[str, str]
    action: Action
    permit: bool
    matched_policy: Optional[str] = None
    consent_checked: bool = False
    block_index: int = Field(..., ge=0)
    tx_index: int = Field(..., ge=0)
    reason: Optional[str] = None


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------


class Architecture(str, Enum):
    PROPOSED = "proposed"
    CLOUD = "cloud"
    POW_CHAIN = "pow_chain"


class Role(str, Enum):
    PATIENT = "patient"
    EDGE = "edge"
    VALIDATOR = "validator"
    PROVIDER = "provider"
    HOSPITAL = "hospital"
    AGGREGATOR = "aggregator"
    KEYHOLDER = "keyholder"
    REMOTE = "remote"
    GATEWAY = "gateway"
    CLOUD = "cloud"


class LinkTemplate(BaseModel):
    """Link parameters for every (src_role, dst_role) node pair the topology wires up."""
    model_config = ConfigDict(frozen=True)

    src_role: Role
    dst_role: Role
    base_ms: float = Field(..., ge=0)
    jitter_ms: float = Field(0.0, ge=0)
    bandwidth_kbps: float = Field(..., gt=0)
    link_class: LinkClass = LinkClass.LAN
    bidirectional: bool = True

    @model_validator(mode="after")
    def check_jitter_within_base(self):
        if self.jitter_ms > self.base_ms:
            raise ValueError(f"jitter_ms {self.jitter_ms} exceeds base_ms {self.base_ms}")
        return self


class MessageSizes(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_bytes: int = Field(defaults.SAMPLE_BYTES, gt=0)
    ack_bytes: int = Field(defaults.ACK_BYTES, gt=0)
    notification_bytes: int = Field(defaults.NOTIFICATION_BYTES, gt=0)
    record_bytes: int = Field(defaults.RECORD_BYTES, gt=0)
    deny_bytes: int = Field(defaults.DENY_BYTES, gt=0)
    row_bytes: int = Field(defaults.ROW_BYTES, gt=0)


class NetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    links: List[LinkTemplate] = Field(default_factory=lambda: [LinkTemplate(**t) for t in defaults.DEFAULT_LINKS])
    sizes: MessageSizes = Field(default_factory=MessageSizes)

    def template(self, src: Role, dst: Role) -> Optional[LinkTemplate]:
        for t in self.links:
            if (t.src_role, t.dst_role) == (src, dst) or (t.bidirectional and (t.dst_role, t.src_role) == (src, dst)):
                return t
        return None


class EnergyConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    costs: EnergyCosts = Field(default_factory=lambda: EnergyCosts(
        cpu_j_per_ms=defaults.CPU_J_PER_MS,
        lan_j_per_kb=defaults.LAN_J_PER_KB,
        wan_j_per_kb=defaults.WAN_J_PER_KB,
        hash_j_per_attempt=defaults.HASH_J_PER_ATTEMPT,
    ))


class TelemetryConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_period_ms: int = Field(defaults.SAMPLE_PERIOD_MS, gt=0)
    random_phase: bool = True
    warmup_ms: int = Field(defaults.WARMUP_MS, ge=0)
    episode_ms: int = Field(defaults.EPISODE_MS, gt=0)
    gap_ms: int = Field(defaults.GAP_MS, ge=0)
    start_jitter_ms: int = Field(defaults.START_JITTER_MS, ge=0)
    tail_ms: int = Field(defaults.TAIL_MS, ge=0)
    magnitudes: Dict[AnomalyKind, float] = Field(default_factory=dict)
    injections: Optional[List[AnomalyInjection]] = Field(
        None, description="Explicit episodes; when set they replace the generated plan.")
    sensor_seal_ms: float = Field(defaults.SENSOR_SEAL_MS, ge=0)

    @field_validator("injections")
    def check_targets(cls, v):
        if v is not None and any(inj.patient_id is None for inj in v):
            raise ValueError("configured injections must name their patient_id")
        return v


class EdgeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    window: int = Field(8, ge=4, description="History length; the edge buffer holds window + 1 samples.")
    threshold: float = Field(3.5, gt=0)
    open_ms: float = Field(defaults.EDGE_OPEN_MS, ge=0)
    process_ms: float = Field(defaults.EDGE_PROCESS_MS, ge=0)


class FlConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    rounds: int = Field(defaults.FL_ROUNDS, ge=1)
    epochs: int = Field(defaults.FL_EPOCHS, ge=1)
    lr: float = Field(defaults.FL_LR, gt=0)
    epsilon: Optional[float] = Field(defaults.FL_EPSILON, gt=0, description="Per-round budget; null disables DP.")
    delta: float = Field(defaults.FL_DELTA, gt=0, lt=1)
    clip_norm: float = Field(defaults.FL_CLIP_NORM, gt=0)
    rows_per_hospital: int = Field(defaults.FL_ROWS_PER_HOSPITAL, ge=1)
    holdout_rows: int = Field(defaults.FL_HOLDOUT_ROWS, ge=1)
    label_noise: float = Field(defaults.FL_LABEL_NOISE, ge=0, lt=0.5)
    attack_rows: int = Field(defaults.FL_ATTACK_ROWS, ge=1)
    start_ms: int = Field(defaults.FL_START_MS, ge=0)
    train_ms: float = Field(defaults.TRAIN_MS, ge=0)
    encrypt_ms: float = Field(defaults.ENCRYPT_MS, ge=0)
    decrypt_ms: float = Field(defaults.DECRYPT_MS, ge=0)

    @model_validator(mode="after")
    def check_attack_rows(self):
        if self.attack_rows > self.rows_per_hospital:
            raise ValueError("attack_rows cannot exceed rows_per_hospital (members are drawn from one hospital)")
        return self

    def dp_params(self) -> Optional[DpParams]:
        if self.epsilon is None:
            return None
        return DpParams.from_budget(self.epsilon, self.delta, self.clip_norm)


class LedgerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    slot_ms: float = Field(defaults.SLOT_MS, gt=0)
    max_tx: int = Field(defaults.POA_MAX_TX, ge=1)
    pool_capacity: int = Field(defaults.POOL_CAPACITY, ge=1)
    heartbeat: bool = False
    sign_ms: float = Field(defaults.SIGN_MS, ge=0)
    verify_ms: float = Field(defaults.VERIFY_MS, ge=0)
    seal_ms: float = Field(defaults.BLOCK_SEAL_MS, ge=0)
    validate_ms: float = Field(defaults.BLOCK_VALIDATE_MS, ge=0)


class PowConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    difficulty: int = Field(defaults.POW_DIFFICULTY, ge=1)
    hash_ms: float = Field(defaults.POW_HASH_MS, gt=0)
    max_tx: int = Field(defaults.POW_MAX_TX, ge=1)
    confirmations: int = Field(defaults.POW_CONFIRMATIONS, ge=1)


class CloudConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    service_rate_tps: float = Field(defaults.CLOUD_SERVICE_RATE_TPS, gt=0)
    process_ms: float = Field(defaults.CLOUD_PROCESS_MS, ge=0)

    @property
    def service_ms(self) -> float:
        return 1000.0 / self.service_rate_tps


class CryptoConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    group_profile: str = Field("default", pattern="^(default|test)$")
    paillier_bits: int = Field(512, ge=64)
    proof_ms: float = Field(defaults.PROOF_MS, ge=0)


class ContractsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_keys: List[str] = Field(default_factory=lambda: list(defaults.SUBJECT_KEYS))
    resource_keys: List[str] = Field(default_factory=lambda: list(defaults.RESOURCE_KEYS))
    policies: List[Policy] = Field(default_factory=lambda: [Policy(**p) for p in defaults.DEFAULT_POLICIES])
    exec_ms: float = Field(defaults.CONTRACT_MS, ge=0)


class TelemedicineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    physicians: int = Field(defaults.REMOTE_PHYSICIANS, ge=0)
    researchers: int = Field(defaults.RESEARCHERS, ge=0)
    request_interval_ms: int = Field(defaults.REQUEST_INTERVAL_MS, gt=0)
    revoke_at_ms: Optional[int] = Field(defaults.REVOKE_AT_MS, ge=0)
    revoke_every: int = Field(defaults.REVOKE_EVERY, ge=1)


class BenchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    probe_ms: int = Field(defaults.PROBE_MS, gt=0)
    probe_offered_tps: float = Field(defaults.PROBE_OFFERED_TPS, gt=0)


# Role pairs each architecture wires up.
REQUIRED_LINKS: Dict[Architecture, List[Tuple[Role, Role]]] = {
    Architecture.PROPOSED: [
        (Role.PATIENT, Role.EDGE), (Role.EDGE, Role.VALIDATOR), (Role.VALIDATOR, Role.VALIDATOR),
        (Role.VALIDATOR, Role.PROVIDER), (Role.HOSPITAL, Role.VALIDATOR), (Role.VALIDATOR, Role.AGGREGATOR),
        (Role.AGGREGATOR, Role.KEYHOLDER), (Role.KEYHOLDER, Role.HOSPITAL), (Role.REMOTE, Role.VALIDATOR),
    ],
    Architecture.CLOUD: [
        (Role.PATIENT, Role.GATEWAY), (Role.GATEWAY, Role.CLOUD), (Role.CLOUD, Role.PROVIDER),
        (Role.HOSPITAL, Role.CLOUD), (Role.REMOTE, Role.CLOUD),
    ],
}
REQUIRED_LINKS[Architecture.POW_CHAIN] = REQUIRED_LINKS[Architecture.PROPOSED]


class ScenarioConfig(BaseModel):
    """One benchmark scenario: workload, architecture and every module's parameters."""

    architecture: Architecture = Architecture.PROPOSED
    patients: int = Field(defaults.PATIENTS, ge=0)
    hospitals: int = Field(defaults.HOSPITALS, ge=1)
    validators: int = Field(defaults.VALIDATORS, ge=1)
    duration_ms: int = Field(defaults.DURATION_MS, gt=0)
    seed: int = Field(..., description="Root seed; every random draw in a run derives from it.")
    telemetry: TelemetryConfig = Field(default_factory=TelemetryConfig)
    edge: EdgeConfig = Field(default_factory=EdgeConfig)
    fl: FlConfig = Field(default_factory=FlConfig)
    ledger: LedgerConfig = Field(default_factory=LedgerConfig)
    pow: Optional[PowConfig] = None
    cloud: Optional[CloudConfig] = None
    crypto: CryptoConfig = Field(default_factory=CryptoConfig)
    contracts: ContractsConfig = Field(default_factory=ContractsConfig)
    telemedicine: TelemedicineConfig = Field(default_factory=TelemedicineConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    energy: EnergyConfig = Field(default_factory=EnergyConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    @model_validator(mode="after")
    def check_architecture(self):
        if self.pow is not None and self.architecture != Architecture.POW_CHAIN:
            raise ValueError(f"a pow section is only valid with architecture=pow_chain, not {self.architecture.value}")
        if self.cloud is not None and self.architecture != Architecture.CLOUD:
            raise ValueError(f"a cloud section is only valid with architecture=cloud, not {self.architecture.value}")
        if self.architecture == Architecture.POW_CHAIN and self.pow is None:
            self.pow = PowConfig()
        if self.architecture == Architecture.CLOUD and self.cloud is None:
            self.cloud = CloudConfig()
        missing = [f"{s.value}->{d.value}" for s, d in REQUIRED_LINKS[self.architecture]
                   if self.net.template(s, d) is None]
        if missing:
            raise ValueError(f"no link template for {', '.join(missing)}")
        if self.telemetry.injections:
            known = {f"p{i:0{max(2, len(str(max(self.patients - 1, 0))))}d}" for i in range(self.patients)}
            unknown = sorted({inj.patient_id for inj in self.telemetry.injections} - known)
            if unknown:
                raise ValueError(f"injections target unknown patients: {', '.join(unknown)}")
        return self

    @property
    def scenario_id(self) -> str:
        return f"{self.architecture.value}-seed{self.seed}"

    def with_overrides(self, **updates) -> "ScenarioConfig":
        """Validated copy with top-level fields replaced; switching architecture drops the other architecture's section."""
        data = self.model_dump(mode="json")
        arch = Architecture(updates.get("architecture", self.architecture))
        if arch != Architecture.POW_CHAIN:
            data.pop("pow", None)
        if arch != Architecture.CLOUD:
            data.pop("cloud", None)
        data.update({k: (v.value if isinstance(v, Enum) else v) for k, v in updates.items() if v is not None})
        return ScenarioConfig.model_validate(data)

    def workload_signature(self) -> Dict:
        """Fields that must agree for two runs to be compared."""
        return self.model_dump(mode="json", include={
            "patients", "hospitals", "validators", "duration_ms", "seed",
            "telemetry", "edge", "fl", "contracts", "telemedicine", "bench",
        })


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class LatencyStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    count: int = Field(..., ge=0)
    mean: float
    p50: float
    p95: float

    @model_validator(mode="after")
    def check_order(self):
        if self.p50 > self.p95 + 1e-9:
            raise ValueError("p50 must not exceed p95")
        return self


class AccessCounts(BaseModel):
    model_config = ConfigDict(frozen=True)

    permits: int = 0
    denies: int = 0
    violations: int = 0


class AttackPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: Optional[float] = Field(None, description="Per-round budget; null means DP off.")
    seeds: int
    mean_advantage: float
    sd_advantage: float
    mean_accuracy: float


class MetricsReport(BaseModel):
    scenario_id: str
    architecture: Architecture
    seed: int
    duration_ms: int
    patients: int
    alert_latency_ms: Optional[LatencyStats] = None
    episodes: int = 0
    episodes_detected: int = 0
    episodes_missed: int = 0
    other_alerts: int = 0
    notifications: int = 0
    throughput_tps: float = 0.0
    committed_txs: int = 0
    blocks: int = 0
    hash_attempts: int = 0
    energy_j: Dict[str, float] = Field(default_factory=dict)
    energy_total_j: float = 0.0
    energy_by_counter: Dict[str, float] = Field(default_factory=dict)
    attack: List[AttackPoint] = Field(default_factory=list)
    access: AccessCounts = Field(default_factory=AccessCounts)
    access_latency_ms: Optional[LatencyStats] = None
    model_accuracy: Optional[float] = None
    epsilon_spent: Optional[float] = None
    delta_spent: Optional[float] = None


class ThroughputResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario_id: str
    offered_tps: float
    submitted: int
    committed: int
    sustained_tps: float
    saturated: bool = Field(..., description="True when sustained throughput falls short of the offered rate by more than 5%.")


class ComparativeRow(BaseModel):
    architecture: Architecture
    latency_ms: Optional[float]
    throughput_tps: float
    energy_j: float
    latency_reduction_pct: Optional[float] = None
    tps_improvement_pct: Optional[float] = None
    energy_reduction_pct: Optional[float] = None
    data_privacy: str
    security: str


class ComparativeReport(BaseModel):
    baseline: Architecture
    rows: List[ComparativeRow]
