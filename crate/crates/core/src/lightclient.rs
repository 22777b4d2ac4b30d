//! Light client: handshake and channel lifecycle, cumulative payments,
//! response verdicts, fraud-proof construction, liveness probing and
//! dispute handling.
//!
//! Headers and channel records come from the chain directly and for free;
//! everything served by the full node is treated as adversarial.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chain::{check_inclusion, BlockHeader, ChainState, ChannelStatus, FraudCondition, ProofCheck, SignedTx, TxBody};
use crate::codec::{consent_digest, payment_digest, receipt_digest, ParpRequest, ParpResponse, RpcCall, RpcResult};
use crate::crypto::{address_of_public_key, sign, verify, Address, Digest, PrivateKey, Signature};
use crate::fullnode::{FeeSchedule, HsConfirm, OpenReceipt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Idle,
    Handshaking,
    Unbonded,
    Bonded,
    Unbonding,
}

impl Step {
    /// Whether `self -> to` is a permitted transition.
    pub fn can_move_to(self, to: Step) -> bool {
        use Step::*;
        matches!(
            (self, to),
            (Idle, Handshaking)
                | (Handshaking, Unbonded)
                | (Handshaking, Idle)
                | (Unbonded, Bonded)
                | (Unbonded, Idle)
                | (Bonded, Unbonding)
                | (Unbonding, Idle)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    RequestHashMismatch,
    RequestSigMismatch,
    BadResponseSig,
    ChannelIdMismatch,
    /// A proof-bearing method answered with a claim the trie cannot prove.
    UnprovableResult,
    MalformedResult,
    /// The header at the response height never became available.
    MissingHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid { reason: InvalidReason },
    Fraudulent { condition: FraudCondition },
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum ClientError {
    #[error("operation not allowed in step {0:?}")]
    WrongStep(Step),
    #[error("no headers known")]
    NoHeaders,
    #[error("consent not signed by the contacted node")]
    BadConsent,
    #[error("consent already expired")]
    ConsentExpired,
    #[error("handshake timer expired")]
    TimerExpired,
    #[error("open receipt not signed by the node")]
    BadReceiptSig,
    #[error("open receipt names a channel that is not ours")]
    ReceiptMismatch,
    #[error("not bonded")]
    NotBonded,
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error("a request is already in flight")]
    RequestInFlight,
    #[error("no witness node configured")]
    NoWitnessConfigured,
    #[error("header at the response height unavailable")]
    HeaderUnavailable,
    #[error("round has no fraudulent verdict")]
    NotFraudulent,
    #[error("unknown round")]
    UnknownRound,
}

/// Header at `height` was needed but is not known yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissingHeader {
    pub height: u64,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub key: PrivateKey,
    pub budget: u64,
    pub fees: FeeSchedule,
    /// Ticks to wait for a handshake confirmation.
    pub hs_timeout: u64,
    /// Ticks to wait for the open receipt once the open transaction is sent.
    pub unbonded_timeout: u64,
    /// Ticks to wait for a response before giving up on the node.
    pub response_timeout: u64,
    /// Ticks per block; bounds how long verification waits for a header.
    pub block_interval: u64,
    /// Blocks between liveness probes.
    pub probe_period: u64,
    /// Blocks to wait for a fraud proof to close the channel before closing
    /// it directly.
    pub fraud_close_wait: u64,
    pub header_capacity: usize,
    pub witness: Option<Address>,
}

impl ClientConfig {
    pub fn new(key: PrivateKey, budget: u64) -> Self {
        Self {
            key,
            budget,
            fees: FeeSchedule::default(),
            hs_timeout: 50,
            unbonded_timeout: 100,
            response_timeout: 40,
            block_interval: 10,
            probe_period: 8,
            fraud_close_wait: 4,
            header_capacity: 300,
            witness: None,
        }
    }
}

/// The most recent headers, indexed by height and by hash.
#[derive(Debug, Clone)]
pub struct HeaderStore {
    capacity: usize,
    by_height: BTreeMap<u64, (Digest, BlockHeader)>,
    by_hash: BTreeMap<Digest, u64>,
}

impl HeaderStore {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), by_height: BTreeMap::new(), by_hash: BTreeMap::new() }
    }

    pub fn insert(&mut self, header: BlockHeader) {
        let hash = header.hash();
        self.by_hash.insert(hash, header.height);
        self.by_height.insert(header.height, (hash, header));
        while self.by_height.len() > self.capacity {
            let (_, (old, _)) = self.by_height.pop_first().expect("non-empty");
            self.by_hash.remove(&old);
        }
    }

    pub fn len(&self) -> usize {
        self.by_height.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_height.is_empty()
    }

    pub fn tip(&self) -> Option<(u64, Digest)> {
        self.by_height.last_key_value().map(|(h, (d, _))| (*h, *d))
    }

    pub fn header(&self, height: u64) -> Option<&BlockHeader> {
        self.by_height.get(&height).map(|(_, h)| h)
    }

    pub fn height_of(&self, hash: &Digest) -> Option<u64> {
        self.by_hash.get(hash).copied()
    }

    /// Pulls every header newer than the local tip from the chain.
    pub fn sync(&mut self, chain: &ChainState) {
        let from = match self.tip() {
            Some((h, _)) => h + 1,
            None => chain.height().saturating_sub(self.capacity as u64 - 1),
        };
        for height in from..=chain.height() {
            self.insert(chain.header(height).expect("height within chain").clone());
        }
    }
}

/// Classifies `res` as an answer to `req` from `fn_addr`. Checks run in a
/// fixed order and the first failure decides.
pub fn verify_response(
    req: &ParpRequest,
    res: &ParpResponse,
    fn_addr: &Address,
    headers: &HeaderStore,
) -> Result<Verdict, MissingHeader> {
    let invalid = |reason| Ok(Verdict::Invalid { reason });
    let fraud = |condition| Ok(Verdict::Fraudulent { condition });
    if res.request_hash != req.request_hash {
        return invalid(InvalidReason::RequestHashMismatch);
    }
    if res.request_sig != req.request_sig {
        return invalid(InvalidReason::RequestSigMismatch);
    }
    if !verify(&res.compute_hash(), &res.response_sig, fn_addr) {
        return invalid(InvalidReason::BadResponseSig);
    }
    if res.alpha != req.alpha {
        return invalid(InvalidReason::ChannelIdMismatch);
    }
    if res.amount != req.amount {
        return fraud(FraudCondition::PaymentMismatch);
    }
    if let Some(referenced) = headers.height_of(&req.block_hash) {
        if res.height < referenced {
            return fraud(FraudCondition::StaleHeight);
        }
    }
    let method = req.call.method();
    if !method.is_proof_bearing() {
        return match RpcResult::decode(method, &res.result) {
            Ok(_) => Ok(Verdict::Valid),
            Err(_) => invalid(InvalidReason::MalformedResult),
        };
    }
    let header = headers.header(res.height).ok_or(MissingHeader { height: res.height })?;
    match check_inclusion(&req.call, &res.result, &res.proof, header) {
        ProofCheck::Proven => Ok(Verdict::Valid),
        ProofCheck::Failed => fraud(FraudCondition::BadProof),
        ProofCheck::NotApplicable => invalid(InvalidReason::UnprovableResult),
    }
}

/// Exact wire bytes of a fraudulent exchange plus the header preimage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FraudProofSubmission {
    pub request: Vec<u8>,
    pub response: Vec<u8>,
    pub header: Vec<u8>,
    pub witness: Address,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub round: u64,
    pub request: ParpRequest,
    pub response: Option<ParpResponse>,
    pub verdict: Option<Verdict>,
    pub probe: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientAction {
    SendHandshake { to: Address },
    SendRequest { to: Address, request: ParpRequest },
    SubmitTx(SignedTx),
    SendFraudProof(FraudProofSubmission),
}

/// What happened to a response handed to [`LightClient::on_response`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseOutcome {
    /// No request in flight; the message was dropped.
    Ignored,
    /// The header at the response height is not known yet.
    Deferred,
    Judged { round: u64, verdict: Verdict, actions: Vec<ClientAction> },
}

#[derive(Debug, Clone)]
struct InFlight {
    round: u64,
    sent_at: u64,
    resent: bool,
    deferred: Option<(ParpResponse, u64)>,
}

#[derive(Debug, Clone)]
pub struct LightClient {
    cfg: ClientConfig,
    step: Step,
    fn_addr: Option<Address>,
    alpha: Option<u64>,
    a: u64,
    last_sig: Signature,
    headers: HeaderStore,
    hs_deadline: Option<u64>,
    unbonded_deadline: Option<u64>,
    in_flight: Option<InFlight>,
    sessions: Vec<SessionRecord>,
    next_round: u64,
    last_probe: u64,
    retry_close_at: Option<u64>,
    submitted: BTreeSet<u64>,
    nonce: u64,
    transitions: Vec<(Step, Step)>,
}

impl LightClient {
    pub fn new(cfg: ClientConfig) -> Self {
        let headers = HeaderStore::new(cfg.header_capacity);
        Self {
            cfg,
            step: Step::Idle,
            fn_addr: None,
            alpha: None,
            a: 0,
            last_sig: Signature::EMPTY,
            headers,
            hs_deadline: None,
            unbonded_deadline: None,
            in_flight: None,
            sessions: Vec::new(),
            next_round: 0,
            last_probe: 0,
            retry_close_at: None,
            submitted: BTreeSet::new(),
            nonce: 0,
            transitions: Vec::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.cfg.key.address()
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn step(&self) -> Step {
        self.step
    }

    pub fn alpha(&self) -> Option<u64> {
        self.alpha
    }

    pub fn node(&self) -> Option<Address> {
        self.fn_addr
    }

    /// Cumulative amount signed so far on the current channel.
    pub fn spent(&self) -> u64 {
        self.a
    }

    pub fn headers(&self) -> &HeaderStore {
        &self.headers
    }

    /// Rounds of the current channel, or of the most recent one while idle.
    pub fn sessions(&self) -> &[SessionRecord] {
        &self.sessions
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Drains the log of step transitions taken since the last call.
    pub fn take_transitions(&mut self) -> Vec<(Step, Step)> {
        core::mem::take(&mut self.transitions)
    }

    fn move_to(&mut self, to: Step) {
        debug_assert!(self.step.can_move_to(to), "illegal transition {:?} -> {to:?}", self.step);
        self.transitions.push((self.step, to));
        self.step = to;
        if to == Step::Handshaking {
            self.sessions.clear();
        }
        if to == Step::Idle {
            self.fn_addr = None;
            self.alpha = None;
            self.a = 0;
            self.last_sig = Signature::EMPTY;
            self.hs_deadline = None;
            self.unbonded_deadline = None;
            self.in_flight = None;
            self.retry_close_at = None;
            self.submitted.clear();
        }
    }

    fn sign_tx(&mut self, body: TxBody) -> SignedTx {
        self.nonce += 1;
        SignedTx::new(body, self.nonce, &self.cfg.key)
    }

    pub fn sync_headers(&mut self, chain: &ChainState) {
        self.headers.sync(chain);
    }

    pub fn start_handshake(&mut self, fn_addr: Address, now: u64) -> Result<ClientAction, ClientError> {
        if self.step != Step::Idle {
            return Err(ClientError::WrongStep(self.step));
        }
        if self.headers.is_empty() {
            return Err(ClientError::NoHeaders);
        }
        self.move_to(Step::Handshaking);
        self.fn_addr = Some(fn_addr);
        self.hs_deadline = Some(now + self.cfg.hs_timeout);
        Ok(ClientAction::SendHandshake { to: fn_addr })
    }

    /// Validates the node's consent and emits the open transaction with the
    /// budget attached.
    pub fn on_hsconfirm(&mut self, msg: &HsConfirm, now: u64) -> Result<SignedTx, ClientError> {
        if self.step != Step::Handshaking {
            return Err(ClientError::WrongStep(self.step));
        }
        if self.hs_deadline.is_some_and(|d| now >= d) {
            return Err(ClientError::TimerExpired);
        }
        let fn_addr = self.fn_addr.expect("set while handshaking");
        if address_of_public_key(&msg.public_key) != Some(fn_addr)
            || !verify(&consent_digest(&self.address(), msg.expiry), &msg.consent_sig, &fn_addr)
        {
            return Err(ClientError::BadConsent);
        }
        let next_height = self.headers.tip().map_or(0, |(h, _)| h) + 1;
        if msg.expiry < next_height {
            return Err(ClientError::ConsentExpired);
        }
        self.move_to(Step::Unbonded);
        self.hs_deadline = None;
        self.unbonded_deadline = Some(now + self.cfg.unbonded_timeout);
        Ok(self.sign_tx(TxBody::OpenChannel {
            fn_addr,
            expiry: msg.expiry,
            consent_sig: msg.consent_sig,
            budget: self.cfg.budget,
        }))
    }

    pub fn on_open_receipt(&mut self, receipt: &OpenReceipt, chain: &ChainState) -> Result<(), ClientError> {
        let fn_addr = self.fn_addr.ok_or(ClientError::WrongStep(self.step))?;
        if !verify(&receipt_digest(receipt.alpha), &receipt.sig, &fn_addr) {
            return Err(ClientError::BadReceiptSig);
        }
        if self.step == Step::Bonded && self.alpha == Some(receipt.alpha) {
            return Ok(());
        }
        if self.step != Step::Unbonded {
            return Err(ClientError::WrongStep(self.step));
        }
        match chain.channel(receipt.alpha) {
            Some(c) if c.lc == self.address() && c.fn_addr == fn_addr && c.status == ChannelStatus::Open => {}
            _ => return Err(ClientError::ReceiptMismatch),
        }
        self.move_to(Step::Bonded);
        self.alpha = Some(receipt.alpha);
        self.a = 0;
        self.last_sig = Signature::EMPTY;
        self.unbonded_deadline = None;
        self.last_probe = self.headers.tip().map_or(0, |(h, _)| h);
        Ok(())
    }

    /// Builds the next request, paying `fee(call)` on top of the amount
    /// signed so far. Nothing changes until [`Self::dispatch`].
    pub fn build_request(&self, call: RpcCall) -> Result<ParpRequest, ClientError> {
        if self.step != Step::Bonded {
            return Err(ClientError::NotBonded);
        }
        let alpha = self.alpha.expect("bonded");
        let amount = self
            .a
            .checked_add(self.cfg.fees.fee(call.method()))
            .filter(|a| *a <= self.cfg.budget)
            .ok_or(ClientError::BudgetExhausted)?;
        let (_, block_hash) = self.headers.tip().ok_or(ClientError::NoHeaders)?;
        let mut req = ParpRequest {
            alpha,
            block_hash,
            amount,
            call,
            request_hash: Digest::default(),
            payment_sig: sign(&payment_digest(alpha, amount), &self.cfg.key),
            request_sig: Signature::EMPTY,
        };
        req.request_hash = req.compute_hash();
        req.request_sig = sign(&req.request_hash, &self.cfg.key);
        Ok(req)
    }

    pub fn dispatch(&mut self, req: &ParpRequest, now: u64, probe: bool) -> Result<ClientAction, ClientError> {
        if self.step != Step::Bonded {
            return Err(ClientError::NotBonded);
        }
        if self.in_flight.is_some() {
            return Err(ClientError::RequestInFlight);
        }
        debug_assert!(req.amount >= self.a && req.amount <= self.cfg.budget);
        self.a = req.amount;
        self.last_sig = req.payment_sig;
        let round = self.next_round;
        self.next_round += 1;
        self.sessions.push(SessionRecord { round, request: req.clone(), response: None, verdict: None, probe });
        self.in_flight = Some(InFlight { round, sent_at: now, resent: false, deferred: None });
        Ok(ClientAction::SendRequest { to: self.fn_addr.expect("bonded"), request: req.clone() })
    }

    /// Builds and dispatches a request in one step.
    pub fn request(&mut self, call: RpcCall, now: u64) -> Result<ClientAction, ClientError> {
        if self.in_flight.is_some() {
            return Err(ClientError::RequestInFlight);
        }
        let req = self.build_request(call)?;
        self.dispatch(&req, now, false)
    }

    fn session_mut(&mut self, round: u64) -> &mut SessionRecord {
        self.sessions.iter_mut().find(|s| s.round == round).expect("in-flight round has a record")
    }

    pub fn on_response(&mut self, res: &ParpResponse, chain: &ChainState, now: u64) -> ResponseOutcome {
        let Some(flight) = &self.in_flight else { return ResponseOutcome::Ignored };
        if self.step != Step::Bonded {
            return ResponseOutcome::Ignored;
        }
        let round = flight.round;
        let req = self.session_mut(round).request.clone();
        let fn_addr = self.fn_addr.expect("bonded");
        let verdict = match verify_response(&req, res, &fn_addr, &self.headers) {
            Ok(v) => v,
            Err(MissingHeader { .. }) => {
                self.headers.sync(chain);
                match verify_response(&req, res, &fn_addr, &self.headers) {
                    Ok(v) => v,
                    Err(_) => {
                        let until = now + self.cfg.block_interval;
                        self.in_flight.as_mut().expect("checked").deferred = Some((res.clone(), until));
                        return ResponseOutcome::Deferred;
                    }
                }
            }
        };
        let actions = self.judge(round, res.clone(), verdict, chain);
        ResponseOutcome::Judged { round, verdict, actions }
    }

    fn judge(&mut self, round: u64, res: ParpResponse, verdict: Verdict, chain: &ChainState) -> Vec<ClientAction> {
        let record = self.session_mut(round);
        record.response = Some(res.clone());
        record.verdict = Some(verdict);
        let probe = record.probe;
        let request = record.request.clone();
        let mut actions = Vec::new();
        match verdict {
            Verdict::Valid => {
                self.in_flight = None;
                if probe {
                    let alpha = self.alpha.expect("bonded");
                    let reported = RpcResult::decode(request.call.method(), &res.result);
                    let on_chain = chain.channel(alpha).map(|c| c.status);
                    let agrees = matches!(
                        (reported, on_chain),
                        (Ok(RpcResult::ChannelStatus(s)), Some(c)) if s == c.to_byte()
                    );
                    if !agrees || on_chain != Some(ChannelStatus::Open) {
                        actions.extend(self.react_to_chain(chain));
                    }
                }
            }
            Verdict::Invalid { reason: InvalidReason::RequestHashMismatch }
                if !self.in_flight.as_ref().expect("judging in-flight").resent =>
            {
                let flight = self.in_flight.as_mut().expect("judging in-flight");
                flight.resent = true;
                actions.push(ClientAction::SendRequest { to: self.fn_addr.expect("bonded"), request });
            }
            Verdict::Invalid { .. } => {
                self.in_flight = None;
                actions.push(ClientAction::SubmitTx(self.close_tx(chain)));
            }
            Verdict::Fraudulent { .. } => {
                self.in_flight = None;
                match self.construct_fraud_proof(round) {
                    Ok(proof) => {
                        actions.push(ClientAction::SendFraudProof(proof));
                        self.move_to(Step::Unbonding);
                        self.retry_close_at = Some(chain.height() + self.cfg.fraud_close_wait);
                    }
                    Err(_) => actions.push(ClientAction::SubmitTx(self.close_tx(chain))),
                }
            }
        }
        actions
    }

    /// Bundles a fraudulent round for the witness.
    pub fn construct_fraud_proof(&self, round: u64) -> Result<FraudProofSubmission, ClientError> {
        let record = self.sessions.iter().find(|s| s.round == round).ok_or(ClientError::UnknownRound)?;
        let (Some(Verdict::Fraudulent { .. }), Some(res)) = (record.verdict, &record.response) else {
            return Err(ClientError::NotFraudulent);
        };
        let witness = self.cfg.witness.ok_or(ClientError::NoWitnessConfigured)?;
        let header = self.headers.header(res.height).ok_or(ClientError::HeaderUnavailable)?;
        Ok(FraudProofSubmission {
            request: record.request.encode(),
            response: res.encode(),
            header: header.encode(),
            witness,
        })
    }

    fn close_tx(&mut self, chain: &ChainState) -> SignedTx {
        let alpha = self.alpha.expect("channel known when closing");
        if self.step == Step::Bonded {
            self.move_to(Step::Unbonding);
        }
        self.in_flight = None;
        self.retry_close_at = Some(chain.height() + self.cfg.fraud_close_wait.max(1));
        let sig = if self.a == 0 { Signature::EMPTY } else { self.last_sig };
        self.sign_tx(TxBody::CloseChannel { alpha, amount: self.a, payment_sig: sig })
    }

    /// Closes the channel with the latest signed cumulative amount.
    pub fn close(&mut self, chain: &ChainState) -> Result<SignedTx, ClientError> {
        match self.step {
            Step::Bonded | Step::Unbonding => Ok(self.close_tx(chain)),
            other => Err(ClientError::WrongStep(other)),
        }
    }

    /// Cross-checks the channel record on chain; on a close the client did
    /// not expect, moves to unbonding and defends its latest state.
    fn react_to_chain(&mut self, chain: &ChainState) -> Vec<ClientAction> {
        let mut actions = Vec::new();
        let Some(alpha) = self.alpha else { return actions };
        let Some(chan) = chain.channel(alpha) else { return actions };
        if chan.status == ChannelStatus::Open {
            return actions;
        }
        if self.step == Step::Bonded {
            self.move_to(Step::Unbonding);
            self.in_flight = None;
        }
        if chan.status == ChannelStatus::Closing
            && self.a > chan.state.amount
            && chan.dispute_deadline.is_some_and(|d| chain.height() < d)
            && self.submitted.insert(self.a)
        {
            let (amount, payment_sig) = (self.a, self.last_sig);
            actions.push(ClientAction::SubmitTx(self.sign_tx(TxBody::SubmitState { alpha, amount, payment_sig })));
        }
        actions
    }

    /// Chain advanced: sync headers, probe liveness, follow closure.
    pub fn on_block(&mut self, chain: &ChainState, now: u64) -> Vec<ClientAction> {
        self.headers.sync(chain);
        let tip = chain.height();
        let mut actions = Vec::new();
        match self.step {
            Step::Bonded if tip >= self.last_probe + self.cfg.probe_period => {
                self.last_probe = tip;
                actions.extend(self.react_to_chain(chain));
                if self.step == Step::Bonded && self.in_flight.is_none() {
                    let alpha = self.alpha.expect("bonded");
                    if let Ok(req) = self.build_request(RpcCall::GetChannelStatus(alpha)) {
                        actions.push(self.dispatch(&req, now, true).expect("idle and bonded"));
                    }
                }
            }
            Step::Unbonding => {
                let alpha = self.alpha.expect("unbonding a known channel");
                match chain.channel(alpha).map(|c| c.status) {
                    Some(ChannelStatus::Closed) | None => self.move_to(Step::Idle),
                    Some(ChannelStatus::Closing) => actions.extend(self.react_to_chain(chain)),
                    Some(ChannelStatus::Open) => {
                        if self.retry_close_at.is_some_and(|h| tip >= h) {
                            actions.push(ClientAction::SubmitTx(self.close_tx(chain)));
                        }
                    }
                }
            }
            _ => {}
        }
        actions
    }

    /// Timer expiry: handshake and receipt timeouts, unanswered requests and
    /// deferred verifications.
    pub fn on_tick(&mut self, chain: &ChainState, now: u64) -> Vec<ClientAction> {
        let mut actions = Vec::new();
        match self.step {
            Step::Handshaking if self.hs_deadline.is_some_and(|d| now >= d) => self.move_to(Step::Idle),
            Step::Unbonded if self.unbonded_deadline.is_some_and(|d| now >= d) => {
                // An open that made it on chain without a receipt is closed
                // right away so the budget is not stranded.
                let me = self.address();
                let orphan = chain.channels().find(|c| {
                    c.lc == me && Some(c.fn_addr) == self.fn_addr && c.status == ChannelStatus::Open
                });
                if let Some(chan) = orphan {
                    let alpha = chan.alpha;
                    let tx = self.sign_tx(TxBody::CloseChannel { alpha, amount: 0, payment_sig: Signature::EMPTY });
                    actions.push(ClientAction::SubmitTx(tx));
                }
                self.move_to(Step::Idle);
            }
            Step::Bonded => {
                let Some(flight) = &self.in_flight else { return actions };
                let round = flight.round;
                if let Some((res, until)) = flight.deferred.clone() {
                    self.headers.sync(chain);
                    let req = self.session_mut(round).request.clone();
                    let fn_addr = self.fn_addr.expect("bonded");
                    match verify_response(&req, &res, &fn_addr, &self.headers) {
                        Ok(verdict) => actions.extend(self.judge(round, res, verdict, chain)),
                        Err(_) if now >= until => {
                            let verdict = Verdict::Invalid { reason: InvalidReason::MissingHeader };
                            actions.extend(self.judge(round, res, verdict, chain));
                        }
                        Err(_) => {}
                    }
                } else if now >= flight.sent_at + self.cfg.response_timeout {
                    actions.push(ClientAction::SubmitTx(self.close_tx(chain)));
                }
            }
            _ => {}
        }
        actions
    }
}
