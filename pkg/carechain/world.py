"""
Simulated deployment for one scenario: the principal population, their keys,
the actor nodes of the chosen architecture and the links between them, all
wired onto one netsim kernel. The bench module drives a World and reduces
its logs into reports.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

from carechain.contracts import (
    AccessRequest,
    ConsentChange,
    ContractEngine,
    ContractEvent,
    ModelUpdatePayload,
    PolicySet,
    RecordWrite,
    access_proof_context,
)
from carechain.crypto import (
    EncryptedNumber,
    KeyPair,
    dh_derive,
    group_params,
    keygen,
    open_frame,
    paillier_keygen,
    schnorr_prove,
    seal,
)
from carechain.edge import EdgeNode
from carechain.fedlearn import (
    EncryptedAggregator,
    KeyHolder,
    Row,
    apply_delta,
    build_rows,
    encrypt_update,
    fed_avg,
    hospital_datasets,
    local_train,
    privatize,
    update_seed,
)
from carechain.ledger import (
    Block,
    Chain,
    Consensus,
    Transaction,
    TxKind,
    TxPool,
    genesis_poa,
    genesis_pow,
    poa_seal,
    pow_seal,
    validate,
)
from carechain.netsim import CounterKind, Link, LinkClass, SimEvent, Simulator
from carechain.schemas import (
    Action,
    Alert,
    AnomalyInjection,
    Architecture,
    GlobalModel,
    LocalDataset,
    Principal,
    Role,
    ScenarioConfig,
    VitalsSample,
)
from carechain.telemetry import build_streams, make_cohort, plan_injections
from carechain.utils import derive_seed, seeded_rng

logger = logging.getLogger(__name__)

AGGREGATOR_ID = "agg"
KEYHOLDER_ID = "kh"
CLOUD_ID = "cloud"


class Node:
    """Base actor: dispatches each event to `on_<kind>`."""

    role: Role

    def __init__(self, world: "World", node_id: str):
        self.world = world
        self.id = node_id

    @property
    def sim(self) -> Simulator:
        return self.world.sim

    def handle(self, event: SimEvent) -> None:
        handler = getattr(self, f"on_{event.kind}", None)
        if handler is None:
            raise ValueError(f"Node '{self.id}' cannot handle '{event.kind}' events.")
        handler(event)


# ---------------------------------------------------------------------------
# Data sources
# ---------------------------------------------------------------------------


class PatientDevice(Node):
    """Sensor bundle of one patient: seals each sample for its edge node (or gateway) and signs consent changes."""

    role = Role.PATIENT

    def __init__(self, world, node_id, uplink: str):
        super().__init__(world, node_id)
        self.uplink = uplink
        self.channel_key = world.dh_key(node_id, uplink)
        self.frames = 0

    def on_sample_due(self, event: SimEvent) -> None:
        sample: VitalsSample = event.payload
        cfg = self.world.config
        frame = seal(self.channel_key, sample.model_dump_json().encode("utf-8"), self.frames)
        self.frames += 1
        after = self.sim.cpu(self.id, cfg.telemetry.sensor_seal_ms)
        self.sim.send(self.id, self.uplink, cfg.net.sizes.sample_bytes, "frame", frame, after_ms=after)

    def on_consent_due(self, event: SimEvent) -> None:
        change: ConsentChange = event.payload
        tx = self.world.make_tx(self.id, TxKind.CONSENT_CHANGE, change.model_dump_json().encode("utf-8"))
        after = self.sim.cpu(self.id, self.world.config.ledger.sign_ms)
        self.world.mark_submitted(tx, after)
        self.sim.send(self.id, self.uplink, tx.size_bytes, "relay_tx", tx, after_ms=after)


class EdgeGateway(Node):
    """Edge node of the proposed stacks: decrypts frames, runs detection, turns alerts into signed transactions."""

    role = Role.EDGE

    def __init__(self, world, node_id, validator: str):
        super().__init__(world, node_id)
        self.validator = validator
        cfg = world.config.edge
        self.detector = EdgeNode(node_id, window=cfg.window, threshold=cfg.threshold)

    def on_frame(self, event: SimEvent) -> None:
        cfg = self.world.config
        key = self.world.dh_key(self.id, event.src)
        sample = VitalsSample.model_validate_json(open_frame(key, event.payload))
        spent = self.sim.cpu(self.id, cfg.edge.open_ms) + self.sim.cpu(self.id, cfg.edge.process_ms)
        _, alert = self.detector.ingest(sample)
        if alert is None:
            return
        tx = self.world.make_tx(self.id, TxKind.ALERT, alert.model_dump_json().encode("utf-8"))
        self.world.alerts[tx.tx_id.hex()] = alert
        spent += self.sim.cpu(self.id, cfg.ledger.sign_ms)
        self.world.mark_submitted(tx, spent)
        self.sim.send(self.id, self.validator, tx.size_bytes, "tx", tx, after_ms=spent)

    def on_relay_tx(self, event: SimEvent) -> None:
        tx: Transaction = event.payload
        self.sim.send(self.id, self.validator, tx.size_bytes, "tx", tx)


class CloudGateway(Node):
    """Hospital gateway of the cloud baseline: decrypts sensor frames and forwards raw samples over the WAN."""

    role = Role.GATEWAY

    def on_frame(self, event: SimEvent) -> None:
        cfg = self.world.config
        key = self.world.dh_key(self.id, event.src)
        sample = VitalsSample.model_validate_json(open_frame(key, event.payload))
        after = self.sim.cpu(self.id, cfg.edge.open_ms)
        self.sim.send(self.id, CLOUD_ID, cfg.net.sizes.sample_bytes, "sample", sample, after_ms=after)

    def on_relay_tx(self, event: SimEvent) -> None:
        tx: Transaction = event.payload
        self.sim.send(self.id, CLOUD_ID, tx.size_bytes, "tx", tx)


# ---------------------------------------------------------------------------
# Consortium ledger
# ---------------------------------------------------------------------------


class Validator(Node):
    """
    Consortium validator. Verifies incoming transactions into the shared pool;
    under PoA seals its rounds and collects majority acknowledgements, under
    PoW the first validator mines continuously and commits confirmed blocks.
    """

    role = Role.VALIDATOR

    # --- admission ------------------------------------------------------

    def on_tx(self, event: SimEvent) -> None:
        after = self.sim.cpu(self.id, self.world.config.ledger.verify_ms)
        self.sim.schedule(after, self.id, "admit", event.payload)

    def on_admit(self, event: SimEvent) -> None:
        tx: Transaction = event.payload
        result = self.world.pool.submit(tx)
        if not result.accepted:
            logger.debug(f"{self.id} rejected tx from {tx.sender}: {result.reason.value}")
            return
        for other in self.world.validator_ids:
            if other != self.id:
                self.world.charge_transfer(self.id, other, tx.size_bytes)

    # --- proof of authority ---------------------------------------------

    def on_slot(self, event: SimEvent) -> None:
        world, cfg = self.world, self.world.config.ledger
        round_ = event.payload
        nxt = round_ + 1
        self.sim.schedule_at(nxt * cfg.slot_ms, world.chain.leader(nxt), "slot", nxt)
        if self.world.in_flight is not None:
            logger.debug(f"{self.id}: block still in flight at round {round_}; slot skipped.")
            return
        if len(world.pool) == 0 and not cfg.heartbeat:
            return
        block = poa_seal(world.chain, world.pool, round_, self.id, world.keys[self.id], self.sim.now_ms, cfg.max_tx)
        after = self.sim.cpu(self.id, cfg.seal_ms)
        self.world.in_flight, self.world.acks = block, 1
        if self.world.acks >= world.quorum:
            self.sim.schedule(after, self.id, "commit", block)
            return
        for other in world.validator_ids:
            if other != self.id:
                self.sim.send(self.id, other, block.size_bytes, "block", block, after_ms=after)

    def on_block(self, event: SimEvent) -> None:
        block: Block = event.payload
        after = self.sim.cpu(self.id, self.world.config.ledger.validate_ms)
        rule = validate(self.world.chain, block)
        if rule is not None:
            logger.warning(f"{self.id} refused block {block.header.index} from {event.src}: {rule.value}")
            return
        self.sim.send(self.id, event.src, self.world.config.net.sizes.ack_bytes, "ack", block.header.hash(), after_ms=after)

    def on_ack(self, event: SimEvent) -> None:
        if self.world.in_flight is None or event.payload != self.world.in_flight.header.hash():
            return
        self.world.acks += 1
        if self.world.acks == self.world.quorum:
            self.sim.schedule(0.0, self.id, "commit", self.world.in_flight)

    def on_commit(self, event: SimEvent) -> None:
        block: Block = event.payload
        self.world.chain.append(block)
        self.world.in_flight, self.world.acks = None, 0
        self.world.commit_block(self.id, block)

    # --- proof of work ----------------------------------------------------

    def on_mine(self, event: SimEvent) -> None:
        world, cfg = self.world, self.world.config.pow
        txs = world.pool.drain(cfg.max_tx)
        block = pow_seal(world.chain, txs, cfg.difficulty, derive_seed(world.config.seed, "mine", len(world.chain)),
                         self.sim.now_ms, sealer_id=self.id)
        self.sim.energy.charge(self.id, CounterKind.HASH_ATTEMPTS, block.attempts)
        world.hash_attempts += block.attempts
        self.sim.schedule(block.attempts * cfg.hash_ms, self.id, "mined", block)

    def on_mined(self, event: SimEvent) -> None:
        world = self.world
        block: Block = event.payload
        world.chain.append(block)
        for other in world.validator_ids:
            if other != self.id:
                self.sim.send(self.id, other, block.size_bytes, "pow_block", block)
        confirmed = len(world.chain) - world.config.pow.confirmations
        while world.pow_committed < confirmed:
            world.pow_committed += 1
            world.commit_block(self.id, world.chain.blocks[world.pow_committed])
        self.sim.schedule(0.0, self.id, "mine")

    def on_pow_block(self, event: SimEvent) -> None:
        self.sim.cpu(self.id, self.world.config.ledger.validate_ms)


# ---------------------------------------------------------------------------
# Central cloud baseline
# ---------------------------------------------------------------------------


class CloudServer(Node):
    """
    Central EHR cloud: runs detection on raw samples and pushes every
    transaction through one FIFO server with a fixed service time.
    """

    role = Role.CLOUD

    def __init__(self, world, node_id):
        super().__init__(world, node_id)
        cfg = world.config
        self.detector = EdgeNode(node_id, window=cfg.edge.window, threshold=cfg.edge.threshold)
        self.busy = False
        self.rows: Dict[str, List[Row]] = {}

    def on_sample(self, event: SimEvent) -> None:
        cfg = self.world.config
        after = self.sim.cpu(self.id, cfg.cloud.process_ms)
        _, alert = self.detector.ingest(event.payload)
        if alert is None:
            return
        tx = self.world.make_tx(self.id, TxKind.ALERT, alert.model_dump_json().encode("utf-8"))
        self.world.alerts[tx.tx_id.hex()] = alert
        self.world.mark_submitted(tx, after)
        self.sim.schedule(after, self.id, "admit", tx)

    def on_tx(self, event: SimEvent) -> None:
        self.on_admit(event)

    def on_admit(self, event: SimEvent) -> None:
        result = self.world.pool.submit(event.payload)
        if not result.accepted:
            logger.debug(f"cloud rejected tx from {event.payload.sender}: {result.reason.value}")
            return
        self._start()

    def _start(self) -> None:
        if self.busy or len(self.world.pool) == 0:
            return
        tx = self.world.pool.drain(1)[0]
        self.busy = True
        service = self.sim.cpu(self.id, self.world.config.cloud.service_ms)
        self.sim.schedule(service, self.id, "served", tx)

    def on_served(self, event: SimEvent) -> None:
        self.busy = False
        self.world.commit_single(self.id, event.payload)
        self._start()

    def on_rows(self, event: SimEvent) -> None:
        data: LocalDataset = event.payload
        self.rows[data.node_id] = data.rows
        if len(self.rows) < self.world.config.hospitals:
            return
        cfg = self.world.config.fl
        union = LocalDataset(node_id=self.id, rows=[r for h in sorted(self.rows) for r in self.rows[h]])
        model = GlobalModel()
        for _ in range(cfg.rounds):
            update = local_train(model, union, cfg.epochs, cfg.lr)
            self.world.train_losses[self.id] = update.train_loss
            model = fed_avg([update], model)
        self.sim.cpu(self.id, cfg.train_ms * cfg.rounds * self.world.config.hospitals)
        self.world.final_model = model


# ---------------------------------------------------------------------------
# Consumers and the federated-learning roles
# ---------------------------------------------------------------------------


class Provider(Node):
    role = Role.PROVIDER

    def on_notify(self, event: SimEvent) -> None:
        notification, _ = event.payload
        self.world.notify_log.append((notification.alert_id, self.id, self.sim.now_ms))


class Hospital(Node):
    """Trains on its local cohort each round and publishes the privatized, encrypted delta as a transaction."""

    role = Role.HOSPITAL

    def __init__(self, world, node_id, dataset: LocalDataset, uplink: str):
        super().__init__(world, node_id)
        self.dataset = dataset
        self.uplink = uplink
        self.model = GlobalModel()

    def on_fl_start(self, event: SimEvent) -> None:
        if self.world.arch == Architecture.CLOUD:
            size = len(self.dataset.rows) * self.world.config.net.sizes.row_bytes
            self.sim.send(self.id, self.uplink, size, "rows", self.dataset)
            return
        self._train()

    def on_model(self, event: SimEvent) -> None:
        self.model = event.payload
        if self.model.round < self.world.config.fl.rounds:
            self._train()

    def _train(self) -> None:
        world, cfg = self.world, self.world.config.fl
        round_ = self.model.round
        update = local_train(self.model, self.dataset, cfg.epochs, cfg.lr)
        world.train_losses[self.id] = update.train_loss
        dp = cfg.dp_params()
        released = privatize(update, cfg.clip_norm, dp, update_seed(world.config.seed, self.id, round_))
        vector = encrypt_update(released, world.paillier_public, seeded_rng(world.config.seed, "paillier-r", self.id, round_),
                                world.config.hospitals)
        payload = ModelUpdatePayload(
            node_id=self.id,
            round=round_,
            sample_count=released.sample_count,
            ciphertexts=[format(c.ciphertext, "x") for c in vector],
            clipped=released.clipped,
            clip_norm=released.clip_norm,
            epsilon=dp.epsilon if dp else None,
            delta_p=dp.delta_p if dp else None,
            train_loss=update.train_loss,
        )
        spent = self.sim.cpu(self.id, cfg.train_ms) + self.sim.cpu(self.id, cfg.encrypt_ms)
        tx = world.make_tx(self.id, TxKind.MODEL_UPDATE, payload.model_dump_json().encode("utf-8"))
        spent += self.sim.cpu(self.id, world.config.ledger.sign_ms)
        world.mark_submitted(tx, spent)
        self.sim.send(self.id, self.uplink, tx.size_bytes, "tx", tx, after_ms=spent)

    def on_probe_tx(self, event: SimEvent) -> None:
        world = self.world
        record = RecordWrite(patient_id=event.payload, summary={"source": "probe"})
        tx = world.make_tx(self.id, TxKind.RECORD_WRITE, record.model_dump_json().encode("utf-8"))
        world.probe_ids.add(tx.tx_id)
        after = self.sim.cpu(self.id, world.config.ledger.sign_ms)
        world.mark_submitted(tx, after)
        self.sim.send(self.id, self.uplink, tx.size_bytes, "tx", tx, after_ms=after)


class AggregatorNode(Node):
    """Sums ciphertext updates routed to it by the contracts; holds no decryption key."""

    role = Role.AGGREGATOR

    def __init__(self, world, node_id):
        super().__init__(world, node_id)
        self.aggregator = EncryptedAggregator(world.paillier_public, participants=world.config.hospitals)

    def on_update(self, event: SimEvent) -> None:
        update: ModelUpdatePayload = event.payload
        vector = [EncryptedNumber(self.aggregator.public_key, int(c, 16)) for c in update.ciphertexts]
        result = self.aggregator.offer(update.round, vector, update.sample_count)
        if result is None:
            return
        sums, total = result
        size = sum(len(c.to_bytes()) for c in sums)
        self.sim.send(self.id, KEYHOLDER_ID, size, "sum", (sums, total), after_ms=self.sim.cpu(self.id, 1.0))


class KeyHolderNode(Node):
    """Decrypts only aggregated sums and broadcasts the next global model."""

    role = Role.KEYHOLDER

    def __init__(self, world, node_id, private_key):
        super().__init__(world, node_id)
        self.keyholder = KeyHolder(private_key)
        self.model = GlobalModel()

    def on_sum(self, event: SimEvent) -> None:
        sums, total = event.payload
        after = self.sim.cpu(self.id, self.world.config.fl.decrypt_ms)
        self.model = apply_delta(self.model, self.keyholder.open_sum(sums, total))
        self.world.final_model = self.model
        logger.debug(f"Global model advanced to round {self.model.round} at {self.sim.now_ms:.1f} ms")
        size = len(self.model.model_dump_json())
        for h in self.world.hospital_ids:
            self.sim.send(self.id, h, size, "model", self.model, after_ms=after)


class RemoteClinician(Node):
    """Remote physician or researcher: authenticates each record request with a Schnorr proof."""

    role = Role.REMOTE

    def __init__(self, world, node_id, uplink: str):
        super().__init__(world, node_id)
        self.uplink = uplink
        self.rng = seeded_rng(world.config.seed, "telemed", node_id)
        self.sent: Dict[str, float] = {}
        self.count = 0

    def on_request_due(self, event: SimEvent) -> None:
        world = self.world
        cfg = world.config
        next_t = self.sim.now_ms + cfg.telemedicine.request_interval_ms
        if next_t < cfg.duration_ms - cfg.telemetry.tail_ms:
            self.sim.schedule_at(next_t, self.id, "request_due")
        patient = self.rng.choice(world.patient_ids)
        request_id = f"{self.id}-{self.count}"
        self.count += 1
        context = access_proof_context(request_id, self.id, patient, "record", Action.READ)
        proof = schnorr_prove(world.group, world.keys[self.id], context, request_id)
        request = AccessRequest(request_id=request_id, requester=self.id, patient_id=patient,
                                proof=proof.to_bytes(world.group).hex())
        spent = self.sim.cpu(self.id, cfg.crypto.proof_ms)
        tx = world.make_tx(self.id, TxKind.ACCESS_REQUEST, request.model_dump_json().encode("utf-8"))
        spent += self.sim.cpu(self.id, cfg.ledger.sign_ms)
        world.mark_submitted(tx, spent)
        self.sent[request_id] = self.sim.now_ms
        self.sim.send(self.id, self.uplink, tx.size_bytes, "tx", tx, after_ms=spent)

    def on_access_result(self, event: SimEvent) -> None:
        request, decision, frame = event.payload
        if frame is not None:
            open_frame(self.world.dh_key(self.id, event.src), frame)
        self.world.access_latencies.append(self.sim.now_ms - self.sent.pop(request.request_id))


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


class World:
    """Population, keys, chain or cloud, contract engine and the wired simulator for one run."""

    def __init__(self, config: ScenarioConfig, trace: bool = False, probe_offered_tps: Optional[float] = None):
        self.config = config
        self.arch = config.architecture
        self.probe = probe_offered_tps is not None
        self.sim = Simulator(config.seed, config.energy.costs, trace)
        self.group = group_params(config.crypto.group_profile)
        seed = config.seed

        # logs read by the bench module
        self.alerts: Dict[str, Alert] = {}
        self.notify_log: List[Tuple[str, str, float]] = []
        self.submit_times: Dict[bytes, float] = {}
        self.commit_times: Dict[bytes, float] = {}
        self.access_latencies: List[float] = []
        self.train_losses: Dict[str, float] = {}
        self.final_model: Optional[GlobalModel] = None
        self.journal: List[Tuple[float, Sequence[Transaction]]] = []
        self.probe_ids = set()
        self.hash_attempts = 0
        self.pow_committed = 0
        self._frames_out = 0
        # PoA block awaiting its quorum; one at a time across the consortium
        self.in_flight: Optional[Block] = None
        self.acks = 0

        # population
        self.profiles = make_cohort(config.patients, seed, config.telemetry.sample_period_ms, config.telemetry.random_phase)
        self.patient_ids = [p.patient_id for p in self.profiles]
        self.hospital_ids = [f"h{j}" for j in range(config.hospitals)]
        self.validator_ids = [f"v{k}" for k in range(config.validators)] if self.arch != Architecture.CLOUD else []
        self.quorum = len(self.validator_ids) // 2 + 1
        self.org_of = {pid: self.hospital_ids[i % config.hospitals] for i, pid in enumerate(self.patient_ids)}
        tele = config.telemedicine
        tele_on = tele.enabled and not self.probe and bool(self.patient_ids)
        self.remote_ids = [f"r{k}" for k in range(tele.physicians)] if tele_on else []
        self.researcher_ids = [f"x{k}" for k in range(tele.researchers)] if tele_on else []
        self.fl_on = config.fl.enabled and not self.probe

        self.principals = self._principals()
        self.keys: Dict[str, KeyPair] = {
            pid: keygen(self.group, seeded_rng(seed, "identity", pid)) for pid in sorted(self.principals)
        }
        registry = {pid: kp.y for pid, kp in self.keys.items()}
        self._dh_cache: Dict[Tuple[str, str], bytes] = {}

        if self.fl_on and self.arch != Architecture.CLOUD:
            self.paillier_public, self._paillier_private = paillier_keygen(config.crypto.paillier_bits, seed)

        # ledger or cloud store
        if self.arch == Architecture.CLOUD:
            self.chain = None
        else:
            consensus = Consensus.POA if self.arch == Architecture.PROPOSED else Consensus.POW
            self.chain = Chain(self.group, self.validator_ids, registry, consensus,
                               config.pow.difficulty if consensus == Consensus.POW else None)
            registry = self.chain.registry
        self.registry = registry
        self.pool = TxPool(self.group, registry, config.ledger.pool_capacity)

        self.engine = ContractEngine(
            PolicySet(config.contracts.policies, config.contracts.subject_keys, config.contracts.resource_keys),
            self.principals,
            self._subscriptions(),
            {pid: {"org": self.org_of[pid], "ward": f"w{self.hospital_ids.index(self.org_of[pid])}"}
             for pid in self.patient_ids},
            self.group,
            registry,
            aggregator_id=AGGREGATOR_ID if self.fl_on and self.arch != Architecture.CLOUD else None,
        )
        self.pool.admit = self.engine.admit

        self._build_nodes()
        self._build_links()
        if self.chain is not None:
            self._genesis()
        if self.probe:
            self._schedule_probe(probe_offered_tps)
        else:
            self._schedule_workload()

    # --- population -------------------------------------------------------

    def _principals(self) -> Dict[str, Principal]:
        out: Dict[str, Principal] = {}

        def add(pid: str, **attrs: str) -> None:
            out[pid] = Principal(id=pid, attributes=attrs)

        for pid in self.patient_ids:
            add(pid, role="patient", org=self.org_of[pid])
        for h in self.hospital_ids:
            j = h[1:]
            add(h, role="hospital", org=h)
            add(f"d{j}", role="physician", org=h)
            if self.arch == Architecture.CLOUD:
                add(f"g{j}", role="gateway", org=h)
            else:
                add(f"e{j}", role="edge", org=h)
        for v in self.validator_ids:
            add(v, role="validator")
        for r in self.remote_ids:
            add(r, role="physician", org="telemed")
        for x in self.researcher_ids:
            add(x, role="researcher", org="research")
        if self.arch == Architecture.CLOUD:
            add(CLOUD_ID, role="cloud")
        elif self.fl_on:
            add(AGGREGATOR_ID, role="aggregator")
            add(KEYHOLDER_ID, role="keyholder")
        return out

    def _subscriptions(self) -> Dict[str, List[str]]:
        subs = {}
        for pid in self.patient_ids:
            j = self.org_of[pid][1:]
            subs[pid] = [f"d{j}"] + list(self.researcher_ids)
        return subs

    def home_validator(self, index: int) -> str:
        return self.validator_ids[index % len(self.validator_ids)]

    def _build_nodes(self) -> None:
        cloud = self.arch == Architecture.CLOUD
        nodes: List[Node] = []
        for j, h in enumerate(self.hospital_ids):
            nodes.append(Provider(self, f"d{j}"))
            if cloud:
                nodes.append(CloudGateway(self, f"g{j}"))
            else:
                nodes.append(EdgeGateway(self, f"e{j}", self.home_validator(j)))
        for i, pid in enumerate(self.patient_ids):
            j = self.org_of[pid][1:]
            nodes.append(PatientDevice(self, pid, f"g{j}" if cloud else f"e{j}"))
        for v in self.validator_ids:
            nodes.append(Validator(self, v))
        if cloud:
            nodes.append(CloudServer(self, CLOUD_ID))
        datasets = hospital_datasets(self.config.hospitals, self.config.fl.rows_per_hospital, self.config.seed,
                                     self.config.edge.window, self.config.fl.label_noise) if self.fl_on else []
        for j, h in enumerate(self.hospital_ids):
            data = datasets[j] if datasets else None
            nodes.append(Hospital(self, h, data, CLOUD_ID if cloud else self.home_validator(j)))
        if self.fl_on and not cloud:
            nodes.append(AggregatorNode(self, AGGREGATOR_ID))
            nodes.append(KeyHolderNode(self, KEYHOLDER_ID, self._paillier_private))
        for k, r in enumerate(self.remote_ids + self.researcher_ids):
            nodes.append(RemoteClinician(self, r, CLOUD_ID if cloud else self.home_validator(k)))
        self.nodes: Dict[str, Node] = {}
        for node in nodes:
            self.nodes[node.id] = node
            self.sim.register(node.id, node.handle)
        self.datasets = datasets

    def _build_links(self) -> None:
        by_role: Dict[Role, List[str]] = {}
        for node in self.nodes.values():
            by_role.setdefault(node.role, []).append(node.id)
        for t in self.config.net.links:
            pairs = [(t.src_role, t.dst_role)] + ([(t.dst_role, t.src_role)] if t.bidirectional else [])
            for src_role, dst_role in pairs:
                for src in by_role.get(src_role, []):
                    for dst in by_role.get(dst_role, []):
                        if src != dst:
                            self.sim.add_link(Link(src=src, dst=dst, base_ms=t.base_ms, jitter_ms=t.jitter_ms,
                                                   bandwidth_kbps=t.bandwidth_kbps, link_class=t.link_class))

    def _genesis(self) -> None:
        if self.chain.consensus == Consensus.POA:
            genesis = genesis_poa(self.chain, self.keys[self.chain.leader(0)])
            self.sim.schedule_at(self.config.ledger.slot_ms, self.chain.leader(1), "slot", 1)
        else:
            genesis = genesis_pow(self.chain, self.config.seed)
            self.sim.schedule(0.0, self.validator_ids[0], "mine")
        # journal positions match block indices
        self.journal.append((float(genesis.header.timestamp_ms), genesis.transactions))

    # --- workload ---------------------------------------------------------

    def _schedule_workload(self) -> None:
        cfg = self.config
        tcfg = cfg.telemetry
        if tcfg.injections is not None:
            self.injections: List[AnomalyInjection] = list(tcfg.injections)
        else:
            self.injections = plan_injections(
                self.profiles, cfg.duration_ms, cfg.seed, tcfg.warmup_ms, tcfg.episode_ms, tcfg.gap_ms,
                tcfg.start_jitter_ms, tcfg.tail_ms, tcfg.magnitudes,
            )
        self.streams = build_streams(self.profiles, self.injections, cfg.seed, cfg.duration_ms)
        for pid in self.patient_ids:
            for sample in self.streams[pid]:
                self.sim.schedule_at(sample.t_ms, pid, "sample_due", sample)

        # consent grants at start-up; selected patients revoke the remote grant later
        for i, pid in enumerate(self.patient_ids):
            org = self.org_of[pid]
            self.sim.schedule_at(1.0, pid, "consent_due", ConsentChange(
                op="grant", patient_id=pid, grantee={"role": "physician", "org": org}, scope=["alert", "record"]))
            if self.remote_ids:
                remote = self.remote_ids[i % len(self.remote_ids)]
                self.sim.schedule_at(2.0, pid, "consent_due", ConsentChange(
                    op="grant", patient_id=pid, grantee=remote, scope=["record"]))
                revoke_at = cfg.telemedicine.revoke_at_ms
                if revoke_at is not None and i % cfg.telemedicine.revoke_every == 0 and revoke_at < cfg.duration_ms:
                    self.sim.schedule_at(float(revoke_at), pid, "consent_due", ConsentChange(
                        op="revoke", patient_id=pid, grantee=remote, scope=["record"]))

        for k, r in enumerate(self.remote_ids + self.researcher_ids):
            first = tcfg.warmup_ms / 2 + 500.0 * k
            if first < cfg.duration_ms:
                self.sim.schedule_at(first, r, "request_due")

        if self.fl_on:
            for h in self.hospital_ids:
                if cfg.fl.start_ms < cfg.duration_ms:
                    self.sim.schedule_at(float(cfg.fl.start_ms), h, "fl_start")

    def _schedule_probe(self, offered_tps: float) -> None:
        if not offered_tps > 0:
            raise ValueError(f"offered rate must be positive, got {offered_tps}")
        self.injections = []
        self.streams = {}
        interval = 1000.0 / offered_tps
        targets = self.patient_ids or ["p00"]
        i = 0
        while i * interval < self.config.bench.probe_ms:
            h = self.hospital_ids[i % len(self.hospital_ids)]
            self.sim.schedule_at(i * interval, h, "probe_tx", targets[i % len(targets)])
            i += 1

    # --- services used by the nodes -----------------------------------------

    def dh_key(self, a: str, b: str) -> bytes:
        """Channel key of the pair (a, b), derived from a's secret and b's public key."""
        if (a, b) not in self._dh_cache:
            self._dh_cache[(a, b)] = dh_derive(self.group, self.keys[a].x, self.keys[b].y)
        return self._dh_cache[(a, b)]

    def make_tx(self, sender: str, kind: TxKind, payload: bytes) -> Transaction:
        return Transaction.create(self.group, kind, payload, sender, self.keys[sender], int(self.sim.now_ms))

    def mark_submitted(self, tx: Transaction, after_ms: float = 0.0) -> None:
        self.submit_times.setdefault(tx.tx_id, self.sim.now_ms + after_ms)

    def charge_transfer(self, src: str, dst: str, size_bytes: int) -> None:
        """Charges link bytes without scheduling a delivery (pool relay between validators)."""
        link = self.sim.link(src, dst)
        if link.link_class == LinkClass.LAN:
            self.sim.energy.charge(src, CounterKind.LAN_TX_BYTES, size_bytes)
            self.sim.energy.charge(dst, CounterKind.LAN_RX_BYTES, size_bytes)
        else:
            self.sim.energy.charge(src, CounterKind.WAN_TX_BYTES, size_bytes)
            self.sim.energy.charge(dst, CounterKind.WAN_RX_BYTES, size_bytes)

    def commit_block(self, node_id: str, block: Block) -> None:
        now = self.sim.now_ms
        for tx in block.transactions:
            self.commit_times[tx.tx_id] = now
        self.journal.append((float(block.header.timestamp_ms), block.transactions))
        logger.debug(f"Block {block.header.index} committed by {node_id} at {now:.1f} ms with {len(block.transactions)} txs")
        after = self.sim.cpu(node_id, self.config.contracts.exec_ms)
        events = self.engine.execute_block(block.transactions, float(block.header.timestamp_ms), block.header.index)
        self._dispatch(node_id, events, after)

    def commit_single(self, node_id: str, tx: Transaction) -> None:
        now = self.sim.now_ms
        self.commit_times[tx.tx_id] = now
        index = len(self.journal)
        self.journal.append((now, [tx]))
        after = self.sim.cpu(node_id, self.config.contracts.exec_ms)
        self._dispatch(node_id, self.engine.execute_tx(tx, now, index, 0), after)

    def _dispatch(self, node_id: str, events: Sequence[ContractEvent], after: float) -> None:
        sizes = self.config.net.sizes
        for ev in events:
            if ev.kind == "notify":
                self.sim.send(node_id, ev.target, sizes.notification_bytes, "notify", ev.data, after_ms=after)
            elif ev.kind == "access_result":
                request, decision = ev.data
                if decision.permit:
                    record = f'{{"patient_id":"{request.patient_id}","kind":"{request.kind}"}}'.encode("utf-8")
                    frame = seal(self.dh_key(node_id, ev.target), record, self._frames_out)
                    self._frames_out += 1
                    payload, size = (request, decision, frame), max(sizes.record_bytes, len(frame))
                else:
                    payload, size = (request, decision, None), sizes.deny_bytes
                self.sim.send(node_id, ev.target, size, "access_result", payload, after_ms=after)
            elif ev.kind == "model_update":
                size = sum(len(c) // 2 for c in ev.data.ciphertexts)
                self.sim.send(node_id, ev.target, size, "update", ev.data, after_ms=after)

    # --- running ----------------------------------------------------------

    def run(self, until_ms: Optional[float] = None) -> int:
        horizon = float(self.config.duration_ms if until_ms is None else until_ms)
        fired = self.sim.run_until(horizon)
        logger.debug(f"{self.config.scenario_id}: {fired} events fired up to {horizon:.0f} ms")
        return fired

    @property
    def blocks(self) -> int:
        return max(0, len(self.chain) - 1) if self.chain is not None else 0

    def attack_rows(self) -> Tuple[List[Row], List[Row]]:
        """(members, non-members) for the membership attack on the final model."""
        cfg = self.config.fl
        members = self.datasets[0].rows if self.datasets else []
        outsiders = build_rows(cfg.attack_rows, self.config.seed, "outsider-", self.config.edge.window, cfg.label_noise)
        return list(members), outsiders

    def holdout_rows(self) -> List[Row]:
        cfg = self.config.fl
        return build_rows(cfg.holdout_rows, self.config.seed, "holdout-", self.config.edge.window, 0.0)
