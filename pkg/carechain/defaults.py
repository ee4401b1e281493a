"""
Calibrated default constants.

Network and timing constants are not measured values. They are declared
knobs, tuned with `carechain calibrate` until the default scenario lands
on the reference outcomes (alert latency about 120 ms on the edge/PoA
stack, about 200 ms through a central cloud, about 600 ms on a PoW chain,
and sustained throughput of about 120+, 50 and 15 TPS respectively).
The tuned values are frozen here and in assets/default_scenario.json.
"""

# --- workload ---------------------------------------------------------------

PATIENTS = 16
HOSPITALS = 4
VALIDATORS = 4
DURATION_MS = 90_000
SEED = 7

SAMPLE_PERIOD_MS = 1000
WARMUP_MS = 10_000
EPISODE_MS = 5_000
GAP_MS = 9_000
START_JITTER_MS = 1_000
TAIL_MS = 5_000

# --- processing times (simulated ms of CPU) ----------------------------------

SENSOR_SEAL_MS = 0.1
EDGE_OPEN_MS = 0.1
EDGE_PROCESS_MS = 1.0
SIGN_MS = 0.5
VERIFY_MS = 0.5
BLOCK_SEAL_MS = 2.0
BLOCK_VALIDATE_MS = 2.0
CONTRACT_MS = 1.0
PROOF_MS = 1.0
TRAIN_MS = 5.0
ENCRYPT_MS = 2.0
DECRYPT_MS = 2.0

# --- ledger -----------------------------------------------------------------

# Slot interval: the mean half-slot wait (85 ms) plus about 35 ms of pipeline
# puts the mean alert latency near 120 ms.
SLOT_MS = 170
POA_MAX_TX = 32  # 32 / 0.170 s is about 188 TPS of capacity
POOL_CAPACITY = 10_000

# Difficulty and hash time: block time D * h is about 145 ms, a commit waits
# about four block times, and max_tx / block time is about 13.8 TPS.
POW_DIFFICULTY = 1024
POW_HASH_MS = 0.1418
POW_MAX_TX = 2
POW_CONFIRMATIONS = 3

# Fixed service time of 1000 / 50 = 20 ms per transaction.
CLOUD_SERVICE_RATE_TPS = 50.0
CLOUD_PROCESS_MS = 1.1

# --- federated learning -----------------------------------------------------

FL_ROUNDS = 10
FL_EPOCHS = 25
FL_LR = 1.0
FL_EPSILON = 1.0
FL_DELTA = 1e-5
FL_CLIP_NORM = 1.0
FL_ROWS_PER_HOSPITAL = 20
FL_HOLDOUT_ROWS = 200
FL_LABEL_NOISE = 0.1
FL_ATTACK_ROWS = 20
FL_START_MS = 2_000

# --- message sizes (bytes on the wire, for messages that are not ledger objects) ---

SAMPLE_BYTES = 1024
ACK_BYTES = 96
NOTIFICATION_BYTES = 256
RECORD_BYTES = 2048
DENY_BYTES = 128
ROW_BYTES = 96

# --- links ------------------------------------------------------------------

LAN_BANDWIDTH_KBPS = 10_000
SENSOR_BANDWIDTH_KBPS = 2_000
WAN_BANDWIDTH_KBPS = 10_000

DEFAULT_LINKS = [
    {"src_role": "patient", "dst_role": "edge", "base_ms": 2.0, "jitter_ms": 0.5, "bandwidth_kbps": SENSOR_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "patient", "dst_role": "gateway", "base_ms": 2.0, "jitter_ms": 0.5, "bandwidth_kbps": SENSOR_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "edge", "dst_role": "validator", "base_ms": 5.0, "jitter_ms": 0.5, "bandwidth_kbps": LAN_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "validator", "dst_role": "validator", "base_ms": 5.0, "jitter_ms": 0.5, "bandwidth_kbps": LAN_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "validator", "dst_role": "provider", "base_ms": 5.0, "jitter_ms": 0.5, "bandwidth_kbps": LAN_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "hospital", "dst_role": "validator", "base_ms": 5.0, "jitter_ms": 0.5, "bandwidth_kbps": LAN_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "validator", "dst_role": "aggregator", "base_ms": 5.0, "jitter_ms": 0.5, "bandwidth_kbps": LAN_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "aggregator", "dst_role": "keyholder", "base_ms": 5.0, "jitter_ms": 0.5, "bandwidth_kbps": LAN_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "keyholder", "dst_role": "hospital", "base_ms": 5.0, "jitter_ms": 0.5, "bandwidth_kbps": LAN_BANDWIDTH_KBPS, "link_class": "LAN"},
    {"src_role": "remote", "dst_role": "validator", "base_ms": 60.0, "jitter_ms": 5.0, "bandwidth_kbps": WAN_BANDWIDTH_KBPS, "link_class": "WAN"},
    {"src_role": "gateway", "dst_role": "cloud", "base_ms": 95.0, "jitter_ms": 5.0, "bandwidth_kbps": WAN_BANDWIDTH_KBPS, "link_class": "WAN"},
    {"src_role": "hospital", "dst_role": "cloud", "base_ms": 95.0, "jitter_ms": 5.0, "bandwidth_kbps": WAN_BANDWIDTH_KBPS, "link_class": "WAN"},
    {"src_role": "remote", "dst_role": "cloud", "base_ms": 95.0, "jitter_ms": 5.0, "bandwidth_kbps": WAN_BANDWIDTH_KBPS, "link_class": "WAN"},
    {"src_role": "cloud", "dst_role": "provider", "base_ms": 76.0, "jitter_ms": 5.0, "bandwidth_kbps": WAN_BANDWIDTH_KBPS, "link_class": "WAN"},
]

# --- energy -----------------------------------------------------------------

CPU_J_PER_MS = 0.01
LAN_J_PER_KB = 0.1
WAN_J_PER_KB = 0.5
HASH_J_PER_ATTEMPT = 0.001

# --- access control ---------------------------------------------------------

SUBJECT_KEYS = ["role", "org", "status", "guardian_of"]
RESOURCE_KEYS = ["kind", "patient", "org", "ward"]

DEFAULT_POLICIES = [
    {"id": "P1-physician-read", "priority": 10, "subject": {"role": "physician"},
     "resource": {"kind": ["alert", "record"]}, "action": "read", "effect": "permit", "requires_consent": True},
    {"id": "P2-researcher-deny", "priority": 20, "subject": {"role": "researcher"},
     "resource": {"kind": ["alert", "record"]}, "action": "read", "effect": "deny"},
    {"id": "P3-aggregate-updates", "priority": 10, "subject": {"role": "aggregator"},
     "resource": {"kind": "model_update"}, "action": "aggregate", "effect": "permit"},
    {"id": "P4-care-write", "priority": 5, "subject": {"role": ["edge", "hospital"]},
     "resource": {"kind": "record"}, "action": "write", "effect": "permit"},
    {"id": "P5-suspended-deny", "priority": 100, "subject": {"status": "suspended"},
     "resource": {}, "action": "read", "effect": "deny"},
]

# --- telemedicine -----------------------------------------------------------

REMOTE_PHYSICIANS = 2
RESEARCHERS = 1
REQUEST_INTERVAL_MS = 6_000
REVOKE_AT_MS = 45_000
REVOKE_EVERY = 4  # every 4th patient revokes the remote grant

# --- throughput probe -------------------------------------------------------

PROBE_MS = 10_000
PROBE_OFFERED_TPS = 200.0
