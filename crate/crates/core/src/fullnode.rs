//! Serving full node: handshake consent, request verification, execution
//! with inclusion proofs, per-channel payment accounting and closure.
//!
//! The node is a pure state machine over a read-only [`ChainState`]; the
//! caller (usually the simulator) routes its outputs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chain::{ChainState, ChannelStatus, Effect, PaymentState, SignedTx, TxBody};
use crate::codec::{consent_digest, payment_digest, receipt_digest, ExecError, Method, ParpRequest, ParpResponse, RpcCall, RpcResult};
use crate::crypto::{digest, digest_concat, sign, verify, Address, Digest, PrivateKey, Signature};
use crate::trie::tx_index_key;

/// Flat per-method fees in token base units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeeSchedule {
    pub get_balance: u64,
    pub send_transaction: u64,
    pub get_channel_status: u64,
}

impl Default for FeeSchedule {
    fn default() -> Self {
        Self { get_balance: 1, send_transaction: 5, get_channel_status: 0 }
    }
}

impl FeeSchedule {
    pub fn fee(&self, method: Method) -> u64 {
        match method {
            Method::GetBalance => self.get_balance,
            Method::SendTransaction => self.send_transaction,
            Method::GetChannelStatus => self.get_channel_status,
        }
    }
}

/// How a node deviates from the protocol. Used to drive adversarial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BehaviorPolicy {
    #[default]
    Honest,
    /// Echo `a + delta` instead of the request's amount.
    WrongAmount { delta: u64 },
    /// Answer from `height(h_B) - lag`.
    StaleHeight { lag: u64 },
    /// Claim a result the attached proof does not establish.
    BogusProof,
    /// Sign something other than `h_res`.
    BadResponseSig,
    /// Answer with `alpha + 1`.
    WrongChannelId,
    /// Echo a request hash other than the one received.
    WrongRequestHash,
    /// Accept payment but never answer.
    Unresponsive,
    /// Serve honestly, but close channels with a payment state `stale_by`
    /// steps older than the latest one, without telling the client.
    StaleStateClose { stale_by: u64 },
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub key: PrivateKey,
    pub fees: FeeSchedule,
    /// Blocks for which a handshake consent remains usable.
    pub consent_ttl: u64,
    pub behavior: BehaviorPolicy,
}

impl NodeConfig {
    pub fn new(key: PrivateKey) -> Self {
        Self { key, fees: FeeSchedule::default(), consent_ttl: 20, behavior: BehaviorPolicy::Honest }
    }
}

/// Consent to open a channel, answering a client's handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsConfirm {
    /// SEC1 uncompressed public key of the node.
    pub public_key: Vec<u8>,
    pub expiry: u64,
    pub consent_sig: Signature,
}

/// The node's signature over a freshly opened channel id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenReceipt {
    pub alpha: u64,
    pub sig: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub lc: Address,
    pub budget: u64,
    pub last: PaymentState,
    pub status: ChannelStatus,
    /// One state per distinct accepted amount, oldest first.
    pub history: Vec<PaymentState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum NodeError {
    #[error("node has no eligible deposit")]
    NotDeposited,
    #[error("unknown channel")]
    UnknownChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum RequestRejection {
    #[error("undecodable request")]
    Malformed,
    #[error("unknown or inactive channel")]
    UnknownChannel,
    #[error("request hash does not recompute")]
    BadHash,
    #[error("signature not by the channel's client")]
    BadSig,
    #[error("cumulative amount does not cover the fee")]
    InsufficientPayment,
    #[error("cumulative amount exceeds the budget")]
    OverBudget,
    #[error("referenced block hash unknown or outside the window")]
    UnknownBlockRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestOutcome {
    Respond(ParpResponse),
    /// The transaction must be included before the node answers; the
    /// response is emitted by [`FullNode::on_block`].
    AwaitInclusion(SignedTx),
    Silent,
}

#[derive(Debug, Clone, Default)]
pub struct NodeOutput {
    pub receipts: Vec<(Address, OpenReceipt)>,
    pub responses: Vec<(Address, ParpResponse)>,
    pub txs: Vec<SignedTx>,
}

#[derive(Debug, Clone)]
struct Awaiting {
    req: ParpRequest,
    tx_hash: Digest,
}

#[derive(Debug, Clone)]
pub struct FullNode {
    cfg: NodeConfig,
    ledger: BTreeMap<u64, LedgerEntry>,
    consents: BTreeMap<Address, u64>,
    cache: BTreeMap<Digest, ParpResponse>,
    awaiting: Vec<Awaiting>,
    countered: BTreeSet<(u64, u64)>,
    scanned: u64,
    nonce: u64,
}

impl FullNode {
    pub fn new(cfg: NodeConfig) -> Self {
        Self {
            cfg,
            ledger: BTreeMap::new(),
            consents: BTreeMap::new(),
            cache: BTreeMap::new(),
            awaiting: Vec::new(),
            countered: BTreeSet::new(),
            scanned: 0,
            nonce: 0,
        }
    }

    pub fn address(&self) -> Address {
        self.cfg.key.address()
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn behavior(&self) -> BehaviorPolicy {
        self.cfg.behavior
    }

    pub fn set_behavior(&mut self, behavior: BehaviorPolicy) {
        self.cfg.behavior = behavior;
    }

    pub fn ledger(&self, alpha: u64) -> Option<&LedgerEntry> {
        self.ledger.get(&alpha)
    }

    pub fn channels(&self) -> impl Iterator<Item = (u64, &LedgerEntry)> {
        self.ledger.iter().map(|(a, e)| (*a, e))
    }

    pub fn sign_tx(&mut self, body: TxBody) -> SignedTx {
        self.nonce += 1;
        SignedTx::new(body, self.nonce, &self.cfg.key)
    }

    pub fn handle_handshake(&mut self, lc: Address, chain: &ChainState) -> Result<HsConfirm, NodeError> {
        if !chain.is_eligible(&self.address()) {
            return Err(NodeError::NotDeposited);
        }
        let expiry = chain.height() + self.cfg.consent_ttl;
        let consent_sig = sign(&consent_digest(&lc, expiry), &self.cfg.key);
        self.consents.insert(lc, expiry);
        Ok(HsConfirm { public_key: self.cfg.key.public_key().to_vec(), expiry, consent_sig })
    }

    pub fn verify_request(&self, req: &ParpRequest, chain: &ChainState) -> Result<(), RequestRejection> {
        let entry = self.ledger.get(&req.alpha).ok_or(RequestRejection::UnknownChannel)?;
        if entry.status != ChannelStatus::Open {
            return Err(RequestRejection::UnknownChannel);
        }
        let h_req = req.compute_hash();
        if h_req != req.request_hash {
            return Err(RequestRejection::BadHash);
        }
        if !verify(&h_req, &req.request_sig, &entry.lc)
            || !verify(&payment_digest(req.alpha, req.amount), &req.payment_sig, &entry.lc)
        {
            return Err(RequestRejection::BadSig);
        }
        if req.amount > entry.budget {
            return Err(RequestRejection::OverBudget);
        }
        let fee = self.cfg.fees.fee(req.call.method());
        if req.amount < entry.last.amount.saturating_add(fee) {
            return Err(RequestRejection::InsufficientPayment);
        }
        chain.get_block_height_by_hash(&req.block_hash).map_err(|_| RequestRejection::UnknownBlockRef)?;
        Ok(())
    }

    /// Verifies, accounts and executes a request. Re-delivery of an already
    /// answered request returns the cached signed response.
    pub fn handle_request(&mut self, req: &ParpRequest, chain: &ChainState) -> Result<RequestOutcome, RequestRejection> {
        if req.compute_hash() == req.request_hash {
            if let Some(cached) = self.cache.get(&req.request_hash) {
                return Ok(RequestOutcome::Respond(cached.clone()));
            }
            if self.awaiting.iter().any(|w| w.req.request_hash == req.request_hash) {
                return Ok(RequestOutcome::Silent);
            }
        }
        self.verify_request(req, chain)?;
        let entry = self.ledger.get_mut(&req.alpha).expect("verified");
        let state = PaymentState { amount: req.amount, sig: req.payment_sig };
        if entry.history.last().is_none_or(|h| h.amount < state.amount) {
            entry.history.push(state);
        }
        entry.last = state;

        if self.cfg.behavior == BehaviorPolicy::Unresponsive {
            return Ok(RequestOutcome::Silent);
        }
        let tip = chain.height();
        let (result, proof, height) = match &req.call {
            RpcCall::GetBalance(addr) => {
                let (r, p) = balance_at(chain, addr, tip);
                (r, p, tip)
            }
            RpcCall::GetChannelStatus(alpha) => {
                let result = match chain.channel(*alpha) {
                    Some(_) if matches!(self.cfg.behavior, BehaviorPolicy::StaleStateClose { .. }) => {
                        RpcResult::ChannelStatus(ChannelStatus::Open.to_byte())
                    }
                    Some(c) => RpcResult::ChannelStatus(c.status.to_byte()),
                    None => RpcResult::Error(ExecError::UnknownChannel),
                };
                (result, Vec::new(), tip)
            }
            RpcCall::SendTransaction(payload) => match SignedTx::decode(payload) {
                Err(_) => (RpcResult::Error(ExecError::MalformedTransaction), Vec::new(), tip),
                Ok(tx) => {
                    let tx_hash = digest(payload);
                    if let Some(done) = inclusion(chain, &tx_hash) {
                        done
                    } else {
                        self.awaiting.push(Awaiting { req: req.clone(), tx_hash });
                        return Ok(RequestOutcome::AwaitInclusion(tx));
                    }
                }
            },
        };
        Ok(RequestOutcome::Respond(self.respond(req, height, result, proof, chain)))
    }

    fn respond(&mut self, req: &ParpRequest, height: u64, result: RpcResult, proof: Vec<u8>, chain: &ChainState) -> ParpResponse {
        let mut res = ParpResponse {
            alpha: req.alpha,
            height,
            amount: req.amount,
            result: result.encode(),
            proof,
            request_hash: req.request_hash,
            request_sig: req.request_sig,
            response_sig: Signature::EMPTY,
        };
        match self.cfg.behavior {
            BehaviorPolicy::WrongAmount { delta } => res.amount = req.amount.wrapping_add(delta),
            BehaviorPolicy::StaleHeight { lag } => {
                let referenced = chain.get_block_height_by_hash(&req.block_hash).unwrap_or(height);
                let stale = referenced.saturating_sub(lag);
                res.height = stale;
                if let RpcCall::GetBalance(addr) = &req.call {
                    let (r, p) = balance_at(chain, addr, stale);
                    res.result = r.encode();
                    res.proof = p;
                }
            }
            BehaviorPolicy::BogusProof => match result {
                RpcResult::Balance(v) => res.result = RpcResult::Balance(v.wrapping_add(1)).encode(),
                RpcResult::Error(ExecError::UnknownAccount) => res.result = RpcResult::Balance(0).encode(),
                RpcResult::TxHash(_) => {
                    if let Some(last) = res.proof.last_mut() {
                        *last ^= 0x01;
                    }
                }
                _ => {}
            },
            BehaviorPolicy::WrongChannelId => res.alpha = req.alpha.wrapping_add(1),
            BehaviorPolicy::WrongRequestHash => res.request_hash = digest(req.request_hash.as_ref()),
            _ => {}
        }
        let h_res = res.compute_hash();
        res.response_sig = if self.cfg.behavior == BehaviorPolicy::BadResponseSig {
            sign(&digest_concat(&[h_res.as_ref(), b"\xff"]), &self.cfg.key)
        } else {
            sign(&h_res, &self.cfg.key)
        };
        self.cache.insert(req.request_hash, res.clone());
        res
    }

    /// Reacts to the chain having advanced: issues open receipts, answers
    /// requests whose transaction got included, and defends its channels
    /// against stale closes.
    pub fn on_block(&mut self, chain: &ChainState) -> NodeOutput {
        let mut out = NodeOutput::default();
        let me = self.address();
        for height in self.scanned + 1..=chain.height() {
            let block = chain.block(height).expect("height within chain");
            for r in &block.receipts {
                let Ok(Effect::ChannelOpened { alpha }) = r.outcome else { continue };
                let chan = chain.channel(alpha).expect("opened channel exists");
                if chan.fn_addr != me || self.consents.remove(&chan.lc).is_none() {
                    continue;
                }
                self.ledger.insert(
                    alpha,
                    LedgerEntry {
                        lc: chan.lc,
                        budget: chan.budget,
                        last: PaymentState::default(),
                        status: ChannelStatus::Open,
                        history: Vec::new(),
                    },
                );
                out.receipts.push((chan.lc, OpenReceipt { alpha, sig: sign(&receipt_digest(alpha), &self.cfg.key) }));
            }
        }
        self.scanned = chain.height();

        let awaiting = core::mem::take(&mut self.awaiting);
        for w in awaiting {
            match inclusion(chain, &w.tx_hash) {
                Some((result, proof, height)) => {
                    let lc = self.ledger.get(&w.req.alpha).map(|e| e.lc).expect("accepted on a ledger channel");
                    let res = self.respond(&w.req, height, result, proof, chain);
                    out.responses.push((lc, res));
                }
                None => self.awaiting.push(w),
            }
        }

        let defend = !matches!(self.cfg.behavior, BehaviorPolicy::StaleStateClose { .. });
        let mut counters = Vec::new();
        for (alpha, entry) in self.ledger.iter_mut() {
            let Some(chan) = chain.channel(*alpha) else { continue };
            entry.status = chan.status;
            if defend
                && chan.status == ChannelStatus::Closing
                && chan.state.amount < entry.last.amount
                && self.countered.insert((*alpha, entry.last.amount))
            {
                counters.push(TxBody::SubmitState { alpha: *alpha, amount: entry.last.amount, payment_sig: entry.last.sig });
            }
        }
        for body in counters {
            let tx = self.sign_tx(body);
            out.txs.push(tx);
        }
        out
    }

    /// Builds the node's close transaction for `alpha`.
    pub fn initiate_close(&mut self, alpha: u64) -> Result<SignedTx, NodeError> {
        let entry = self.ledger.get(&alpha).ok_or(NodeError::UnknownChannel)?;
        let state = match self.cfg.behavior {
            BehaviorPolicy::StaleStateClose { stale_by } => {
                let keep = entry.history.len().saturating_sub(usize::try_from(stale_by).unwrap_or(usize::MAX));
                match keep.checked_sub(1) {
                    Some(i) => entry.history[i],
                    None => PaymentState::default(),
                }
            }
            _ => entry.last,
        };
        Ok(self.sign_tx(TxBody::CloseChannel { alpha, amount: state.amount, payment_sig: state.sig }))
    }

    /// Forwards a client's fraud proof on-chain verbatim.
    pub fn forward_fraud_proof(&mut self, request: Vec<u8>, response: Vec<u8>, header: Vec<u8>) -> SignedTx {
        self.sign_tx(TxBody::SubmitFraudProof { request, response, header })
    }
}

fn balance_at(chain: &ChainState, addr: &Address, height: u64) -> (RpcResult, Vec<u8>) {
    let trie = chain.state_trie_at(height).expect("height within chain");
    match trie.get(addr.as_ref()) {
        Some(value) => {
            let balance = u64::from_be_bytes(value.try_into().expect("balances are 8 bytes"));
            let proof = trie.prove(addr.as_ref()).expect("present key").encode();
            (RpcResult::Balance(balance), proof)
        }
        None => (RpcResult::Error(ExecError::UnknownAccount), Vec::new()),
    }
}

fn inclusion(chain: &ChainState, tx_hash: &Digest) -> Option<(RpcResult, Vec<u8>, u64)> {
    let (height, receipt) = chain.receipt(tx_hash)?;
    let trie = chain.tx_trie_at(height).expect("included height");
    let proof = trie.prove(&tx_index_key(receipt.index)).expect("included index").encode();
    Some((RpcResult::TxHash(*tx_hash), proof, height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{check_inclusion, ChainParams, Genesis, ProofCheck};
    use crate::crypto::keygen;
    use alloc::vec;

    struct Setup {
        chain: ChainState,
        node: FullNode,
        lc: PrivateKey,
        alpha: u64,
    }

    fn setup(behavior: BehaviorPolicy) -> Setup {
        let (lc, lc_addr) = keygen(21);
        let (nk, n_addr) = keygen(22);
        let mut chain = ChainState::new(Genesis {
            params: ChainParams::default(),
            balances: vec![(lc_addr, 5_000), (n_addr, 5_000)],
            deposits: vec![(n_addr, 1_000)],
        });
        let mut node = FullNode::new(NodeConfig { behavior, ..NodeConfig::new(nk) });
        let hs = node.handle_handshake(lc_addr, &chain).unwrap();
        let open = SignedTx::new(
            TxBody::OpenChannel { fn_addr: n_addr, expiry: hs.expiry, consent_sig: hs.consent_sig, budget: 100 },
            1,
            &lc,
        );
        chain.produce_block(vec![open], 10);
        let out = node.on_block(&chain);
        assert_eq!(out.receipts.len(), 1);
        let alpha = out.receipts[0].1.alpha;
        Setup { chain, node, lc, alpha }
    }

    fn request(s: &Setup, amount: u64, call: RpcCall) -> ParpRequest {
        let mut req = ParpRequest {
            alpha: s.alpha,
            block_hash: s.chain.tip().hash,
            amount,
            call,
            request_hash: Digest::default(),
            payment_sig: sign(&payment_digest(s.alpha, amount), &s.lc),
            request_sig: Signature::EMPTY,
        };
        req.request_hash = req.compute_hash();
        req.request_sig = sign(&req.request_hash, &s.lc);
        req
    }

    fn respond(s: &mut Setup, req: &ParpRequest) -> ParpResponse {
        match s.node.handle_request(req, &s.chain).unwrap() {
            RequestOutcome::Respond(r) => r,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn handshake_requires_deposit() {
        let (nk, _) = keygen(30);
        let (_, lc) = keygen(31);
        let chain = ChainState::new(Genesis::default());
        let mut node = FullNode::new(NodeConfig::new(nk));
        assert_eq!(node.handle_handshake(lc, &chain), Err(NodeError::NotDeposited));
    }

    #[test]
    fn consent_recovers_to_node() {
        let s = setup(BehaviorPolicy::Honest);
        let mut node = s.node.clone();
        let lc = s.lc.address();
        let a = node.handle_handshake(lc, &s.chain).unwrap();
        assert!(verify(&consent_digest(&lc, a.expiry), &a.consent_sig, &node.address()));
        assert_eq!(crate::crypto::address_of_public_key(&a.public_key), Some(node.address()));
    }

    #[test]
    fn payment_checks() {
        let mut s = setup(BehaviorPolicy::Honest);
        let me = s.lc.address();
        let r1 = request(&s, 1, RpcCall::GetBalance(me));
        let res = respond(&mut s, &r1);
        assert_eq!(s.node.ledger(s.alpha).unwrap().last.amount, 1);
        let header = s.chain.header(res.height).unwrap();
        assert_eq!(check_inclusion(&r1.call, &res.result, &res.proof, header), ProofCheck::Proven);
        assert_eq!(RpcResult::decode(Method::GetBalance, &res.result), Ok(RpcResult::Balance(4_900)));

        let again = request(&s, 1, RpcCall::GetBalance(s.node.address()));
        assert_eq!(s.node.verify_request(&again, &s.chain), Err(RequestRejection::InsufficientPayment));
        let over = request(&s, 101, RpcCall::GetBalance(me));
        assert_eq!(s.node.verify_request(&over, &s.chain), Err(RequestRejection::OverBudget));
        let mut bad_hash = request(&s, 2, RpcCall::GetBalance(me));
        bad_hash.amount = 3;
        assert_eq!(s.node.verify_request(&bad_hash, &s.chain), Err(RequestRejection::BadHash));
        let mut unknown = request(&s, 2, RpcCall::GetBalance(me));
        unknown.block_hash = digest(b"elsewhere");
        unknown.request_hash = unknown.compute_hash();
        unknown.request_sig = sign(&unknown.request_hash, &s.lc);
        assert_eq!(s.node.verify_request(&unknown, &s.chain), Err(RequestRejection::UnknownBlockRef));
    }

    #[test]
    fn retries_hit_the_cache() {
        let mut s = setup(BehaviorPolicy::Honest);
        let req = request(&s, 1, RpcCall::GetBalance(s.lc.address()));
        let first = respond(&mut s, &req);
        s.chain.produce_block(vec![], 20);
        assert_eq!(respond(&mut s, &req), first);
    }

    #[test]
    fn send_transaction_waits_for_inclusion() {
        let mut s = setup(BehaviorPolicy::Honest);
        let tx = SignedTx::new(TxBody::Transfer { to: s.node.address(), amount: 7 }, 2, &s.lc);
        let payload = tx.encode();
        let req = request(&s, 5, RpcCall::SendTransaction(payload.clone()));
        let RequestOutcome::AwaitInclusion(pending) = s.node.handle_request(&req, &s.chain).unwrap() else {
            panic!("expected inclusion wait");
        };
        s.chain.produce_block(vec![pending], 20);
        let out = s.node.on_block(&s.chain);
        let (_, res) = &out.responses[0];
        assert_eq!(res.height, 2);
        let header = s.chain.header(2).unwrap();
        assert_eq!(check_inclusion(&req.call, &res.result, &res.proof, header), ProofCheck::Proven);

        let junk = request(&s, 10, RpcCall::SendTransaction(vec![1, 2, 3]));
        let res = respond(&mut s, &junk);
        assert_eq!(res.result, RpcResult::Error(ExecError::MalformedTransaction).encode());
        assert!(res.proof.is_empty());
    }

    #[test]
    fn policies_corrupt_their_field() {
        let call = |s: &Setup| RpcCall::GetBalance(s.lc.address());
        let mut s = setup(BehaviorPolicy::WrongAmount { delta: 10 });
        let req = request(&s, 1, call(&s));
        assert_eq!(respond(&mut s, &req).amount, 11);

        let mut s = setup(BehaviorPolicy::StaleHeight { lag: 1 });
        let req = request(&s, 1, call(&s));
        assert_eq!(respond(&mut s, &req).height, 0);

        let mut s = setup(BehaviorPolicy::WrongChannelId);
        let req = request(&s, 1, call(&s));
        assert_eq!(respond(&mut s, &req).alpha, s.alpha + 1);

        let mut s = setup(BehaviorPolicy::BadResponseSig);
        let req = request(&s, 1, call(&s));
        let res = respond(&mut s, &req);
        assert!(!verify(&res.compute_hash(), &res.response_sig, &s.node.address()));

        let mut s = setup(BehaviorPolicy::BogusProof);
        let req = request(&s, 1, call(&s));
        let res = respond(&mut s, &req);
        let header = s.chain.header(res.height).unwrap();
        assert_eq!(check_inclusion(&req.call, &res.result, &res.proof, header), ProofCheck::Failed);

        let mut s = setup(BehaviorPolicy::Unresponsive);
        let req = request(&s, 1, call(&s));
        assert_eq!(s.node.handle_request(&req, &s.chain), Ok(RequestOutcome::Silent));
    }

    #[test]
    fn stale_close_and_defence() {
        let mut s = setup(BehaviorPolicy::StaleStateClose { stale_by: 1 });
        for a in 1..=3 {
            let req = request(&s, a, RpcCall::GetBalance(s.lc.address()));
            respond(&mut s, &req);
        }
        let close = s.node.initiate_close(s.alpha).unwrap();
        assert!(matches!(close.body, TxBody::CloseChannel { amount: 2, .. }));
        assert_eq!(s.node.initiate_close(99), Err(NodeError::UnknownChannel));

        // An honest node counters a stale close by the client.
        let mut s = setup(BehaviorPolicy::Honest);
        for a in 1..=3 {
            let req = request(&s, a, RpcCall::GetBalance(s.lc.address()));
            respond(&mut s, &req);
        }
        let stale = SignedTx::new(
            TxBody::CloseChannel { alpha: s.alpha, amount: 1, payment_sig: sign(&payment_digest(s.alpha, 1), &s.lc) },
            9,
            &s.lc,
        );
        s.chain.produce_block(vec![stale], 20);
        let out = s.node.on_block(&s.chain);
        assert_eq!(out.txs.len(), 1);
        assert!(matches!(out.txs[0].body, TxBody::SubmitState { amount: 3, .. }));
        assert!(s.node.on_block(&s.chain).txs.is_empty());
    }
}
