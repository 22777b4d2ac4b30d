//! Deterministic discrete-event simulator: bounded-delay message delivery
//! between clients and nodes, periodic block production and scripted
//! actions.
//!
//! Time is counted in logical ticks. Within a tick the loop delivers due
//! messages, produces a block if one is due, runs scripted actions, fires
//! client timers and drains queued calls, in that order. Events due at the
//! same tick are delivered in send order, so a run is a pure function of the
//! scenario and its seed.

use alloc::collections::{BTreeMap, BinaryHeap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};
use core::fmt;
use core::str::FromStr;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::chain::{
    ChainParams, ChainState, ChannelStatus, Effect, FdmError, FraudCondition, Genesis, Settlement, SignedTx, TxBody,
    TxError, TxKind,
};
use crate::codec::{Method, ParpRequest, ParpResponse, RpcCall, LENGTH_PREFIX_LEN};
use crate::crypto::{keygen, Address, Digest, PrivateKey, ADDRESS_LEN, SIGNATURE_LEN};
use crate::fullnode::{BehaviorPolicy, FeeSchedule, FullNode, HsConfirm, NodeConfig, OpenReceipt, RequestOutcome, RequestRejection};
use crate::lightclient::{ClientAction, ClientConfig, FraudProofSubmission, LightClient, ResponseOutcome, Step, Verdict};
use crate::trie::{tx_index_key, Trie};

/// A simulated participant. Serialized as `client:N` / `node:N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Client(usize),
    Node(usize),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Client(i) => write!(f, "client:{i}"),
            Actor::Node(i) => write!(f, "node:{i}"),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (role, idx) = s.split_once(':').ok_or_else(|| format!("expected role:index, got {s:?}"))?;
        let idx: usize = idx.parse().map_err(|_| format!("bad index in {s:?}"))?;
        match role {
            "client" => Ok(Actor::Client(idx)),
            "node" => Ok(Actor::Node(idx)),
            _ => Err(format!("unknown role in {s:?}")),
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An account named by actor (`client:0`) or by `0x`-prefixed address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccountRef {
    Actor(Actor),
    Address(Address),
}

impl Serialize for AccountRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            AccountRef::Actor(a) => serializer.collect_str(a),
            AccountRef::Address(a) => serializer.collect_str(a),
        }
    }
}

impl<'de> Deserialize<'de> for AccountRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
        if s.starts_with("0x") {
            s.parse().map(AccountRef::Address).map_err(serde::de::Error::custom)
        } else {
            s.parse().map(AccountRef::Actor).map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub d_min: u64,
    pub d_max: u64,
    /// Preserve per-link send order.
    pub ordered: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { d_min: 1, d_max: 3, ordered: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeSpec {
    pub behavior: BehaviorPolicy,
    pub balance: u64,
    pub deposit: u64,
    pub fees: FeeSchedule,
    pub consent_ttl: u64,
}

impl Default for NodeSpec {
    fn default() -> Self {
        Self { behavior: BehaviorPolicy::Honest, balance: 10_000, deposit: 1_000, fees: FeeSchedule::default(), consent_ttl: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientSpec {
    pub budget: u64,
    pub balance: u64,
    /// Index of the node acting as witness for fraud proofs.
    pub witness: Option<usize>,
    pub probe_period: u64,
    pub hs_timeout: u64,
    pub response_timeout: u64,
}

impl Default for ClientSpec {
    fn default() -> Self {
        Self { budget: 1_000, balance: 10_000, witness: None, probe_period: 8, hs_timeout: 50, response_timeout: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CallSpec {
    GetBalance { of: AccountRef },
    /// A transfer signed by the calling client.
    SendTransaction { to: AccountRef, amount: u64 },
    /// A payload that does not decode as a transaction.
    SendMalformed,
    /// Status of the caller's own channel.
    GetChannelStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Handshake { client: usize, node: usize },
    Call {
        client: usize,
        call: CallSpec,
        #[serde(default = "one")]
        repeat: u64,
        #[serde(default)]
        every: u64,
    },
    Close { client: usize },
    /// The node closes its channel with `client`.
    NodeClose { node: usize, client: usize },
    SetBehavior { node: usize, behavior: BehaviorPolicy },
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

/// A check evaluated against the trace after the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expectation {
    /// The client's channel settled with exactly these amounts.
    Settled { client: usize, to_node: u64, to_client: u64 },
    Verdicts {
        client: usize,
        valid: Option<u64>,
        invalid: Option<u64>,
        fraudulent: Option<u64>,
    },
    /// Every verdict of every client is valid.
    AllValid,
    FraudAccepted {
        condition: Option<FraudCondition>,
        #[serde(default = "one")]
        count: u64,
    },
    Slashed { node: usize },
    ClientStep { client: usize, step: Step },
    AllChannelsClosed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Last tick simulated.
    pub horizon: u64,
    /// Ticks between blocks.
    pub block_interval: u64,
    pub network: NetworkConfig,
    pub chain: ChainParams,
    pub nodes: Vec<NodeSpec>,
    pub clients: Vec<ClientSpec>,
    pub script: Vec<ScriptStep>,
    pub expect: Vec<Expectation>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: String::from("unnamed"),
            seed: 1,
            horizon: 3_000,
            block_interval: 10,
            network: NetworkConfig::default(),
            chain: ChainParams::default(),
            nodes: Vec::new(),
            clients: Vec::new(),
            script: Vec::new(),
            expect: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("script step {step} references {what}")]
    ScriptReferenceError { step: usize, what: String },
    #[error("delay bounds [{d_min}, {d_max}] violate 1 <= d_min <= d_max")]
    BoundsViolation { d_min: u64, d_max: u64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        check_bounds(self.network.d_min, self.network.d_max)?;
        if self.block_interval == 0 {
            return Err(SimError::InvalidScenario("block_interval must be positive".into()));
        }
        let n_clients = self.clients.len();
        let n_nodes = self.nodes.len();
        let client = |step, i: usize| {
            if i < n_clients { Ok(()) } else { Err(SimError::ScriptReferenceError { step, what: format!("client:{i}") }) }
        };
        let node = |step, i: usize| {
            if i < n_nodes { Ok(()) } else { Err(SimError::ScriptReferenceError { step, what: format!("node:{i}") }) }
        };
        let account = |step, r: &AccountRef| match r {
            AccountRef::Actor(Actor::Client(i)) => client(step, *i),
            AccountRef::Actor(Actor::Node(i)) => node(step, *i),
            AccountRef::Address(_) => Ok(()),
        };
        for (i, c) in self.clients.iter().enumerate() {
            if let Some(w) = c.witness {
                node(i, w).map_err(|_| SimError::InvalidScenario(format!("client:{i} witness node:{w} undeclared")))?;
            }
        }
        for (step, s) in self.script.iter().enumerate() {
            match &s.action {
                Action::Handshake { client: c, node: n } | Action::NodeClose { node: n, client: c } => {
                    client(step, *c)?;
                    node(step, *n)?;
                }
                Action::Call { client: c, call, .. } => {
                    client(step, *c)?;
                    match call {
                        CallSpec::GetBalance { of } => account(step, of)?,
                        CallSpec::SendTransaction { to, .. } => account(step, to)?,
                        CallSpec::SendMalformed | CallSpec::GetChannelStatus => {}
                    }
                }
                Action::Close { client: c } => client(step, *c)?,
                Action::SetBehavior { node: n, .. } => node(step, *n)?,
            }
        }
        for (step, e) in self.expect.iter().enumerate() {
            let r = match e {
                Expectation::Settled { client: c, .. }
                | Expectation::Verdicts { client: c, .. }
                | Expectation::ClientStep { client: c, .. } => client(step, *c),
                Expectation::Slashed { node: n } => node(step, *n),
                _ => Ok(()),
            };
            r.map_err(|e| match e {
                SimError::ScriptReferenceError { what, .. } => {
                    SimError::InvalidScenario(format!("expectation {step} references {what}"))
                }
                other => other,
            })?;
        }
        Ok(())
    }
}

fn check_bounds(d_min: u64, d_max: u64) -> Result<(), SimError> {
    if d_min == 0 || d_min > d_max {
        Err(SimError::BoundsViolation { d_min, d_max })
    } else {
        Ok(())
    }
}

/// Deterministic key for an actor of a scenario.
pub fn actor_key(seed: u64, actor: Actor) -> PrivateKey {
    let (role, idx) = match actor {
        Actor::Client(i) => (1u64, i as u64),
        Actor::Node(i) => (2u64, i as u64),
    };
    keygen(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (role << 32) ^ idx).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Handshake,
    HsConfirm,
    HsRefused,
    OpenReceipt,
    Request,
    Response,
    FraudProof,
}

#[derive(Debug, Clone)]
enum Message {
    Handshake { lc: Address },
    HsConfirm(HsConfirm),
    HsRefused,
    OpenReceipt(OpenReceipt),
    Request(Vec<u8>),
    Response(Vec<u8>),
    FraudProof(FraudProofSubmission),
}

impl Message {
    fn kind(&self) -> MessageKind {
        match self {
            Message::Handshake { .. } => MessageKind::Handshake,
            Message::HsConfirm(_) => MessageKind::HsConfirm,
            Message::HsRefused => MessageKind::HsRefused,
            Message::OpenReceipt(_) => MessageKind::OpenReceipt,
            Message::Request(_) => MessageKind::Request,
            Message::Response(_) => MessageKind::Response,
            Message::FraudProof(_) => MessageKind::FraudProof,
        }
    }

    /// Size of the message's fields as they would travel on the wire.
    fn wire_len(&self) -> usize {
        match self {
            Message::Handshake { .. } => ADDRESS_LEN,
            Message::HsConfirm(hs) => hs.public_key.len() + 8 + SIGNATURE_LEN,
            Message::HsRefused => 0,
            Message::OpenReceipt(_) => 8 + SIGNATURE_LEN,
            Message::Request(b) | Message::Response(b) => b.len(),
            Message::FraudProof(p) => p.request.len() + p.response.len() + p.header.len(),
        }
    }
}

#[derive(Debug, Clone)]
struct Envelope {
    deliver_at: u64,
    seq: u64,
    from: Actor,
    to: Actor,
    msg: Message,
}

impl PartialEq for Envelope {
    fn eq(&self, other: &Self) -> bool {
        (self.deliver_at, self.seq) == (other.deliver_at, other.seq)
    }
}

impl Eq for Envelope {}

impl PartialOrd for Envelope {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Envelope {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.deliver_at, self.seq).cmp(&(other.deliver_at, other.seq))
    }
}

/// One line of the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Start { scenario: String, seed: u64, clients: usize, nodes: usize },
    Block { t: u64, height: u64, hash: Digest, txs: usize, conserved: bool },
    Tx { t: u64, height: u64, index: u64, sender: String, kind: TxKind, error: Option<TxError> },
    Message { t: u64, from: Actor, to: Actor, kind: MessageKind, bytes: usize, deliver_at: u64 },
    Request { t: u64, client: usize, alpha: u64, method: Method, amount: u64, bytes: usize, overhead: usize },
    Response {
        t: u64,
        node: usize,
        alpha: u64,
        method: Method,
        height: u64,
        bytes: usize,
        overhead: usize,
        proof_bytes: usize,
    },
    Rejected { t: u64, node: usize, from: Actor, reason: RequestRejection },
    Verdict { t: u64, client: usize, round: u64, method: Method, probe: bool, verdict: Verdict },
    Step { t: u64, client: usize, from: Step, to: Step },
    Settlement { t: u64, height: u64, alpha: u64, client: String, node: String, to_node: u64, to_client: u64 },
    FraudProof { t: u64, height: u64, witness: String, accepted: Option<FraudCondition>, error: Option<FdmError> },
    Slash { t: u64, height: u64, node: String, total: u64, treasury: u64, client: u64, witness: u64 },
    CallDropped { t: u64, client: usize, reason: String },
    Undelivered { from: Actor, to: Actor, kind: MessageKind, deliver_at: u64 },
    End { t: u64, height: u64, conserved: bool, open_channels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectationResult {
    pub expectation: Expectation,
    pub passed: bool,
    pub detail: String,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceEvent>,
    pub expectations: Vec<ExpectationResult>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.passed) && conserved(&self.trace)
    }
}

/// `true` iff every block and the end state satisfied token conservation.
pub fn conserved(trace: &[TraceEvent]) -> bool {
    trace.iter().all(|e| match e {
        TraceEvent::Block { conserved, .. } | TraceEvent::End { conserved, .. } => *conserved,
        _ => true,
    })
}

pub struct Simulation {
    scenario: Scenario,
    chain: ChainState,
    nodes: Vec<FullNode>,
    clients: Vec<LightClient>,
    queue: BinaryHeap<Reverse<Envelope>>,
    seq: u64,
    rng: ChaCha20Rng,
    link_bounds: BTreeMap<(Actor, Actor), (u64, u64)>,
    last_delivery: BTreeMap<(Actor, Actor), u64>,
    mempool: Vec<SignedTx>,
    calls: Vec<VecDeque<CallSpec>>,
    tx_nonces: Vec<u64>,
    script: Vec<ScriptStep>,
    script_pos: usize,
    addresses: BTreeMap<Address, Actor>,
    trace: Vec<TraceEvent>,
    now: u64,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let node_keys: Vec<_> = (0..scenario.nodes.len()).map(|i| actor_key(scenario.seed, Actor::Node(i))).collect();
        let client_keys: Vec<_> =
            (0..scenario.clients.len()).map(|i| actor_key(scenario.seed, Actor::Client(i))).collect();
        let mut addresses = BTreeMap::new();
        let mut balances = Vec::new();
        let mut deposits = Vec::new();
        for (i, (k, spec)) in node_keys.iter().zip(&scenario.nodes).enumerate() {
            addresses.insert(k.address(), Actor::Node(i));
            balances.push((k.address(), spec.balance));
            if spec.deposit > 0 {
                deposits.push((k.address(), spec.deposit));
            }
        }
        for (i, (k, spec)) in client_keys.iter().zip(&scenario.clients).enumerate() {
            addresses.insert(k.address(), Actor::Client(i));
            balances.push((k.address(), spec.balance));
        }
        let chain = ChainState::new(Genesis { params: scenario.chain.clone(), balances, deposits });
        let nodes = node_keys
            .into_iter()
            .zip(&scenario.nodes)
            .map(|(key, spec)| {
                FullNode::new(NodeConfig { key, fees: spec.fees, consent_ttl: spec.consent_ttl, behavior: spec.behavior })
            })
            .collect();
        let clients = client_keys
            .into_iter()
            .zip(&scenario.clients)
            .map(|(key, spec)| {
                let mut cfg = ClientConfig::new(key, spec.budget);
                cfg.probe_period = spec.probe_period;
                cfg.hs_timeout = spec.hs_timeout;
                cfg.response_timeout = spec.response_timeout;
                cfg.block_interval = scenario.block_interval;
                cfg.witness = spec.witness.map(|w| actor_key(scenario.seed, Actor::Node(w)).address());
                if let Some(w) = spec.witness {
                    cfg.fees = scenario.nodes[w].fees;
                }
                let mut c = LightClient::new(cfg);
                c.sync_headers(&chain);
                c
            })
            .collect();

        let mut script = Vec::new();
        for step in &scenario.script {
            match &step.action {
                Action::Call { client, call, repeat, every } => {
                    for k in 0..*repeat {
                        script.push(ScriptStep {
                            at: step.at + k * every,
                            action: Action::Call { client: *client, call: call.clone(), repeat: 1, every: 0 },
                        });
                    }
                }
                _ => script.push(step.clone()),
            }
        }
        script.sort_by_key(|s| s.at);

        let n_clients = scenario.clients.len();
        let trace = alloc::vec![TraceEvent::Start {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            clients: n_clients,
            nodes: scenario.nodes.len(),
        }];
        Ok(Self {
            rng: ChaCha20Rng::seed_from_u64(scenario.seed),
            scenario,
            chain,
            nodes,
            clients,
            queue: BinaryHeap::new(),
            seq: 0,
            link_bounds: BTreeMap::new(),
            last_delivery: BTreeMap::new(),
            mempool: Vec::new(),
            calls: (0..n_clients).map(|_| VecDeque::new()).collect(),
            tx_nonces: alloc::vec![1 << 40; n_clients],
            script,
            script_pos: 0,
            addresses,
            trace,
            now: 0,
        })
    }

    pub fn chain(&self) -> &ChainState {
        &self.chain
    }

    pub fn client(&self, i: usize) -> &LightClient {
        &self.clients[i]
    }

    pub fn node(&self, i: usize) -> &FullNode {
        &self.nodes[i]
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Overrides the delay bounds of the directed link `from -> to`.
    pub fn inject_delay(&mut self, from: Actor, to: Actor, d_min: u64, d_max: u64) -> Result<(), SimError> {
        check_bounds(d_min, d_max)?;
        self.link_bounds.insert((from, to), (d_min, d_max));
        Ok(())
    }

    /// Queues an arbitrary signed transaction for the next block.
    pub fn inject_tx(&mut self, tx: SignedTx) {
        self.mempool.push(tx);
    }

    fn label(&self, addr: &Address) -> String {
        self.addresses.get(addr).map_or_else(|| addr.to_string(), |a| a.to_string())
    }

    fn send(&mut self, from: Actor, to: Actor, msg: Message) {
        let (d_min, d_max) =
            self.link_bounds.get(&(from, to)).copied().unwrap_or((self.scenario.network.d_min, self.scenario.network.d_max));
        let delay = d_min + self.rng.next_u64() % (d_max - d_min + 1);
        let mut deliver_at = self.now + delay;
        if self.scenario.network.ordered {
            let last = self.last_delivery.entry((from, to)).or_insert(0);
            deliver_at = deliver_at.max(*last);
            *last = deliver_at;
        }
        let bytes = msg.wire_len();
        self.trace.push(TraceEvent::Message { t: self.now, from, to, kind: msg.kind(), bytes, deliver_at });
        self.seq += 1;
        self.queue.push(Reverse(Envelope { deliver_at, seq: self.seq, from, to, msg }));
    }

    fn route_client(&mut self, i: usize, actions: Vec<ClientAction>) {
        for action in actions {
            match action {
                ClientAction::SendHandshake { to } => {
                    let lc = self.clients[i].address();
                    if let Some(&node) = self.addresses.get(&to) {
                        self.send(Actor::Client(i), node, Message::Handshake { lc });
                    }
                }
                ClientAction::SendRequest { to, request } => {
                    let bytes = request.encode();
                    self.trace.push(TraceEvent::Request {
                        t: self.now,
                        client: i,
                        alpha: request.alpha,
                        method: request.call.method(),
                        amount: request.amount,
                        bytes: bytes.len(),
                        overhead: bytes.len() - LENGTH_PREFIX_LEN - request.call.encode().len(),
                    });
                    if let Some(&node) = self.addresses.get(&to) {
                        self.send(Actor::Client(i), node, Message::Request(bytes));
                    }
                }
                ClientAction::SubmitTx(tx) => self.mempool.push(tx),
                ClientAction::SendFraudProof(proof) => {
                    if let Some(&node) = self.addresses.get(&proof.witness) {
                        self.send(Actor::Client(i), node, Message::FraudProof(proof));
                    }
                }
            }
        }
    }

    fn emit_response(&mut self, n: usize, to: Address, res: &ParpResponse, method: Method) {
        let bytes = res.encode();
        self.trace.push(TraceEvent::Response {
            t: self.now,
            node: n,
            alpha: res.alpha,
            method,
            height: res.height,
            bytes: bytes.len(),
            overhead: bytes.len() - 2 * LENGTH_PREFIX_LEN - res.result.len() - res.proof.len(),
            proof_bytes: res.proof.len(),
        });
        if let Some(&client) = self.addresses.get(&to) {
            self.send(Actor::Node(n), client, Message::Response(bytes));
        }
    }

    fn deliver(&mut self, env: Envelope) {
        let now = self.now;
        match (env.to, env.msg) {
            (Actor::Node(n), Message::Handshake { lc }) => {
                let reply = match self.nodes[n].handle_handshake(lc, &self.chain) {
                    Ok(hs) => Message::HsConfirm(hs),
                    Err(_) => Message::HsRefused,
                };
                self.send(env.to, env.from, reply);
            }
            (Actor::Node(n), Message::Request(bytes)) => {
                let Ok(req) = ParpRequest::decode(&bytes) else {
                    self.trace.push(TraceEvent::Rejected { t: now, node: n, from: env.from, reason: RequestRejection::Malformed });
                    return;
                };
                match self.nodes[n].handle_request(&req, &self.chain) {
                    Ok(RequestOutcome::Respond(res)) => {
                        let to = self.nodes[n].ledger(req.alpha).map(|e| e.lc);
                        if let Some(to) = to {
                            self.emit_response(n, to, &res, req.call.method());
                        }
                    }
                    Ok(RequestOutcome::AwaitInclusion(tx)) => self.mempool.push(tx),
                    Ok(RequestOutcome::Silent) => {}
                    Err(reason) => self.trace.push(TraceEvent::Rejected { t: now, node: n, from: env.from, reason }),
                }
            }
            (Actor::Node(n), Message::FraudProof(p)) => {
                let tx = self.nodes[n].forward_fraud_proof(p.request, p.response, p.header);
                self.mempool.push(tx);
            }
            (Actor::Client(c), Message::HsConfirm(hs)) => {
                if let Ok(tx) = self.clients[c].on_hsconfirm(&hs, now) {
                    self.mempool.push(tx);
                }
            }
            (Actor::Client(c), Message::OpenReceipt(r)) => {
                let _ = self.clients[c].on_open_receipt(&r, &self.chain);
            }
            (Actor::Client(c), Message::Response(bytes)) => {
                let Ok(res) = ParpResponse::decode(&bytes) else { return };
                if let ResponseOutcome::Judged { round, verdict, actions } =
                    self.clients[c].on_response(&res, &self.chain, now)
                {
                    self.trace_verdict(c, round, verdict);
                    self.route_client(c, actions);
                }
            }
            _ => {}
        }
    }

    fn trace_verdict(&mut self, c: usize, round: u64, verdict: Verdict) {
        let session = self.clients[c].sessions().iter().find(|s| s.round == round);
        let (method, probe) = session.map_or((Method::GetChannelStatus, false), |s| (s.request.call.method(), s.probe));
        self.trace.push(TraceEvent::Verdict { t: self.now, client: c, round, method, probe, verdict });
    }

    fn produce_block(&mut self) {
        let txs = core::mem::take(&mut self.mempool);
        let t = self.now;
        let block = self.chain.produce_block(txs, t).clone();
        let height = block.header.height;
        let conserved = self.chain.conservation_holds();
        self.trace.push(TraceEvent::Block { t, height, hash: block.hash, txs: block.txs.len(), conserved });
        for s in &block.finalized {
            self.trace_settlement(height, s);
        }
        for r in &block.receipts {
            let sender = r.sender.map_or_else(|| String::from("unknown"), |a| self.label(&a));
            self.trace.push(TraceEvent::Tx {
                t,
                height,
                index: r.index,
                sender: sender.clone(),
                kind: r.kind,
                error: r.outcome.err(),
            });
            match r.outcome {
                Ok(Effect::Settled { settlement }) => self.trace_settlement(height, &settlement),
                Ok(Effect::FraudProven { condition, slash, .. }) => {
                    self.trace.push(TraceEvent::FraudProof { t, height, witness: sender, accepted: Some(condition), error: None });
                    self.trace.push(TraceEvent::Slash {
                        t,
                        height,
                        node: self.label(&slash.node),
                        total: slash.total,
                        treasury: slash.treasury,
                        client: slash.client,
                        witness: slash.witness,
                    });
                }
                Err(TxError::FraudProof(e)) => {
                    self.trace.push(TraceEvent::FraudProof { t, height, witness: sender, accepted: None, error: Some(e) });
                }
                _ => {}
            }
        }

        for n in 0..self.nodes.len() {
            let out = self.nodes[n].on_block(&self.chain);
            for (lc, receipt) in out.receipts {
                if let Some(&to) = self.addresses.get(&lc) {
                    self.send(Actor::Node(n), to, Message::OpenReceipt(receipt));
                }
            }
            for (lc, res) in out.responses {
                self.emit_response(n, lc, &res, Method::SendTransaction);
            }
            self.mempool.extend(out.txs);
        }
        for c in 0..self.clients.len() {
            let actions = self.clients[c].on_block(&self.chain, t);
            self.route_client(c, actions);
        }
    }

    fn trace_settlement(&mut self, height: u64, s: &Settlement) {
        self.trace.push(TraceEvent::Settlement {
            t: self.now,
            height,
            alpha: s.alpha,
            client: self.label(&s.lc),
            node: self.label(&s.fn_addr),
            to_node: s.to_node,
            to_client: s.to_client,
        });
    }

    fn run_action(&mut self, action: Action) {
        let now = self.now;
        match action {
            Action::Handshake { client, node } => {
                let addr = self.nodes[node].address();
                self.clients[client].sync_headers(&self.chain);
                match self.clients[client].start_handshake(addr, now) {
                    Ok(a) => self.route_client(client, alloc::vec![a]),
                    Err(e) => self.trace.push(TraceEvent::CallDropped { t: now, client, reason: e.to_string() }),
                }
            }
            Action::Call { client, call, .. } => self.calls[client].push_back(call),
            Action::Close { client } => {
                self.calls[client].clear();
                match self.clients[client].close(&self.chain) {
                    Ok(tx) => self.mempool.push(tx),
                    Err(e) => self.trace.push(TraceEvent::CallDropped { t: now, client, reason: e.to_string() }),
                }
            }
            Action::NodeClose { node, client } => {
                let alpha = self.clients[client].alpha();
                match alpha.map(|a| self.nodes[node].initiate_close(a)) {
                    Some(Ok(tx)) => self.mempool.push(tx),
                    _ => self.trace.push(TraceEvent::CallDropped {
                        t: now,
                        client,
                        reason: format!("node:{node} has no channel with client:{client}"),
                    }),
                }
            }
            Action::SetBehavior { node, behavior } => self.nodes[node].set_behavior(behavior),
        }
    }

    fn resolve(&self, r: &AccountRef) -> Address {
        match r {
            AccountRef::Address(a) => *a,
            AccountRef::Actor(Actor::Client(i)) => self.clients[*i].address(),
            AccountRef::Actor(Actor::Node(i)) => self.nodes[*i].address(),
        }
    }

    fn pump_calls(&mut self, c: usize) {
        while let Some(spec) = self.calls[c].front() {
            let client = &self.clients[c];
            match client.step() {
                Step::Handshaking | Step::Unbonded => return,
                Step::Bonded if client.is_busy() => return,
                Step::Bonded => {}
                other => {
                    self.calls[c].pop_front();
                    self.trace.push(TraceEvent::CallDropped { t: self.now, client: c, reason: format!("client is {other:?}") });
                    continue;
                }
            }
            let call = match spec {
                CallSpec::GetBalance { of } => RpcCall::GetBalance(self.resolve(of)),
                CallSpec::SendTransaction { to, amount } => {
                    let to = self.resolve(to);
                    self.tx_nonces[c] += 1;
                    let tx = SignedTx::new(
                        TxBody::Transfer { to, amount: *amount },
                        self.tx_nonces[c],
                        &actor_key(self.scenario.seed, Actor::Client(c)),
                    );
                    RpcCall::SendTransaction(tx.encode())
                }
                CallSpec::SendMalformed => RpcCall::SendTransaction(alloc::vec![0xde, 0xad, 0xbe, 0xef]),
                CallSpec::GetChannelStatus => RpcCall::GetChannelStatus(client.alpha().expect("bonded")),
            };
            self.calls[c].pop_front();
            match self.clients[c].request(call, self.now) {
                Ok(action) => {
                    self.route_client(c, alloc::vec![action]);
                    return;
                }
                Err(e) => self.trace.push(TraceEvent::CallDropped { t: self.now, client: c, reason: e.to_string() }),
            }
        }
    }

    fn record_transitions(&mut self) {
        for c in 0..self.clients.len() {
            for (from, to) in self.clients[c].take_transitions() {
                self.trace.push(TraceEvent::Step { t: self.now, client: c, from, to });
            }
        }
    }

    fn quiescent(&self) -> bool {
        self.script_pos == self.script.len()
            && self.queue.is_empty()
            && self.mempool.is_empty()
            && self.calls.iter().all(VecDeque::is_empty)
            && self.clients.iter().all(|c| c.step() == Step::Idle)
            && self.chain.channels().all(|c| c.status == ChannelStatus::Closed)
    }

    /// Advances one tick. Returns `false` once the run is over.
    pub fn tick(&mut self) -> bool {
        if self.now >= self.scenario.horizon || (self.now > 0 && self.quiescent()) {
            return false;
        }
        self.now += 1;
        while self.queue.peek().is_some_and(|Reverse(e)| e.deliver_at <= self.now) {
            let Reverse(env) = self.queue.pop().expect("peeked");
            self.deliver(env);
        }
        if self.now.is_multiple_of(self.scenario.block_interval) {
            self.produce_block();
        }
        while self.script.get(self.script_pos).is_some_and(|s| s.at <= self.now) {
            let action = self.script[self.script_pos].action.clone();
            self.script_pos += 1;
            self.run_action(action);
        }
        for c in 0..self.clients.len() {
            let actions = self.clients[c].on_tick(&self.chain, self.now);
            self.route_client(c, actions);
            self.pump_calls(c);
        }
        self.record_transitions();
        true
    }

    /// Runs to quiescence or the horizon and evaluates expectations.
    pub fn finish(mut self) -> RunOutput {
        while self.tick() {}
        let mut rest: Vec<_> = core::mem::take(&mut self.queue).into_sorted_vec();
        rest.reverse();
        for Reverse(e) in rest {
            self.trace.push(TraceEvent::Undelivered { from: e.from, to: e.to, kind: e.msg.kind(), deliver_at: e.deliver_at });
        }
        let open = self.chain.channels().filter(|c| c.status != ChannelStatus::Closed).count();
        self.trace.push(TraceEvent::End {
            t: self.now,
            height: self.chain.height(),
            conserved: self.chain.conservation_holds(),
            open_channels: open,
        });
        let labels: Vec<String> = (0..self.clients.len()).map(|i| Actor::Client(i).to_string()).collect();
        let node_labels: Vec<String> = (0..self.nodes.len()).map(|i| Actor::Node(i).to_string()).collect();
        let expectations = self
            .scenario
            .expect
            .iter()
            .map(|e| evaluate(e, &self.trace, &labels, &node_labels))
            .collect();
        RunOutput { trace: self.trace, expectations }
    }
}

/// Runs a scenario end to end.
pub fn run(scenario: Scenario) -> Result<RunOutput, SimError> {
    Ok(Simulation::new(scenario)?.finish())
}

fn evaluate(e: &Expectation, trace: &[TraceEvent], clients: &[String], nodes: &[String]) -> ExpectationResult {
    let (passed, detail) = match e {
        Expectation::Settled { client, to_node, to_client } => {
            let got: Vec<(u64, u64)> = trace
                .iter()
                .filter_map(|ev| match ev {
                    TraceEvent::Settlement { client: c, to_node, to_client, .. } if *c == clients[*client] => {
                        Some((*to_node, *to_client))
                    }
                    _ => None,
                })
                .collect();
            (got.last() == Some(&(*to_node, *to_client)), format!("settlements {got:?}"))
        }
        Expectation::Verdicts { client, valid, invalid, fraudulent } => {
            let mut counts = [0u64; 3];
            for ev in trace {
                if let TraceEvent::Verdict { client: c, verdict, .. } = ev {
                    if c == client {
                        counts[match verdict {
                            Verdict::Valid => 0,
                            Verdict::Invalid { .. } => 1,
                            Verdict::Fraudulent { .. } => 2,
                        }] += 1;
                    }
                }
            }
            let ok = [valid, invalid, fraudulent].iter().zip(counts).all(|(want, got)| want.is_none_or(|w| w == got));
            (ok, format!("valid={} invalid={} fraudulent={}", counts[0], counts[1], counts[2]))
        }
        Expectation::AllValid => {
            let verdicts: Vec<_> = trace.iter().filter_map(|ev| match ev {
                TraceEvent::Verdict { verdict, .. } => Some(*verdict),
                _ => None,
            }).collect();
            let bad = verdicts.iter().filter(|v| !v.is_valid()).count();
            (!verdicts.is_empty() && bad == 0, format!("{} verdicts, {bad} not valid", verdicts.len()))
        }
        Expectation::FraudAccepted { condition, count } => {
            let got = trace
                .iter()
                .filter(|ev| match ev {
                    TraceEvent::FraudProof { accepted: Some(c), .. } => condition.is_none_or(|want| want == *c),
                    _ => false,
                })
                .count() as u64;
            (got == *count, format!("{got} accepted"))
        }
        Expectation::Slashed { node } => {
            let hit = trace.iter().any(|ev| matches!(ev, TraceEvent::Slash { node: n, total, .. } if *n == nodes[*node] && *total > 0));
            (hit, String::from(if hit { "slashed" } else { "no slash" }))
        }
        Expectation::ClientStep { client, step } => {
            let last = trace.iter().rev().find_map(|ev| match ev {
                TraceEvent::Step { client: c, to, .. } if c == client => Some(*to),
                _ => None,
            });
            let last = last.unwrap_or(Step::Idle);
            (last == *step, format!("final step {last:?}"))
        }
        Expectation::AllChannelsClosed => {
            let open = trace.iter().rev().find_map(|ev| match ev {
                TraceEvent::End { open_channels, .. } => Some(*open_channels),
                _ => None,
            });
            (open == Some(0), format!("open channels {open:?}"))
        }
    };
    ExpectationResult { expectation: e.clone(), passed, detail }
}

/// Serialized inclusion-proof size for every transaction of a block of `n`
/// signed transfers, indexed by position.
pub fn tx_proof_sizes(n: usize, seed: u64) -> Vec<usize> {
    let senders: Vec<PrivateKey> = (0..8).map(|i| keygen(seed ^ (0xB10C << 8) ^ i).0).collect();
    let trie = (0..n).fold(Trie::new(), |t, i| {
        let to = senders[(i + 1) % senders.len()].address();
        let tx = SignedTx::new(TxBody::Transfer { to, amount: 1 + i as u64 }, i as u64, &senders[i % senders.len()]);
        t.insert(&tx_index_key(i as u64), tx.encode()).expect("short key")
    });
    (0..n).map(|i| trie.prove(&tx_index_key(i as u64)).expect("present").encode().len()).collect()
}
