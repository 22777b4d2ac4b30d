//! Simulated blockchain hosting the three on-chain modules: the full-node
//! deposit registry, the channel manager and the fraud detector.
//!
//! All state changes happen inside [`ChainState::produce_block`], which
//! applies pending transactions in order and records one receipt per
//! transaction. Rejected transactions are still included in the block (and
//! its transaction trie) with a rejection receipt.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::{
    consent_digest, decode_header, encode_header, payment_digest, put_bytes, CodecError, ExecError, ParpRequest,
    ParpResponse, Reader, RpcCall, RpcResult,
};
use crate::crypto::{digest, digest_concat, recover, sign, verify, Address, Digest, PrivateKey, Signature};
use crate::trie::{tx_index_key, verify_encoded_proof, Trie};

/// Tunables of the on-chain modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    /// Blocks during which a closing channel accepts newer states.
    pub dispute_window: u64,
    /// Minimum total deposit for a full node to be eligible to serve.
    pub min_deposit: u64,
    pub reward_split: RewardSplit,
    /// Settle closing channels automatically once their window has passed.
    pub auto_finalize: bool,
    /// Number of most recent block hashes queryable by the fraud detector.
    pub hash_window: u64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            dispute_window: 16,
            min_deposit: 1000,
            reward_split: RewardSplit::default(),
            auto_finalize: true,
            hash_window: 256,
        }
    }
}

/// Relative weights for distributing a slashed deposit. Integer division
/// remainders go to the treasury.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSplit {
    pub treasury: u64,
    pub client: u64,
    pub witness: u64,
}

impl Default for RewardSplit {
    fn default() -> Self {
        Self { treasury: 1, client: 1, witness: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub parent_hash: Digest,
    pub height: u64,
    pub state_root: Digest,
    pub tx_root: Digest,
    pub timestamp: u64,
}

impl BlockHeader {
    pub fn encode(&self) -> Vec<u8> {
        encode_header(self).to_vec()
    }

    pub fn hash(&self) -> Digest {
        digest(&encode_header(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelStatus {
    Open,
    Closing,
    Closed,
}

impl ChannelStatus {
    pub fn to_byte(self) -> u8 {
        match self {
            ChannelStatus::Open => 0,
            ChannelStatus::Closing => 1,
            ChannelStatus::Closed => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ChannelStatus::Open),
            1 => Some(ChannelStatus::Closing),
            2 => Some(ChannelStatus::Closed),
            _ => None,
        }
    }
}

/// A cumulative amount together with the client's signature over it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PaymentState {
    pub amount: u64,
    pub sig: Signature,
}

/// On-chain channel record `(alpha, LC, FN, b, cs, T)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentChannel {
    pub alpha: u64,
    pub lc: Address,
    pub fn_addr: Address,
    pub budget: u64,
    pub state: PaymentState,
    pub status: ChannelStatus,
    pub dispute_deadline: Option<u64>,
    pub opened_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxBody {
    Transfer { to: Address, amount: u64 },
    Deposit { amount: u64 },
    OpenChannel { fn_addr: Address, expiry: u64, consent_sig: Signature, budget: u64 },
    CloseChannel { alpha: u64, amount: u64, payment_sig: Signature },
    SubmitState { alpha: u64, amount: u64, payment_sig: Signature },
    ConfirmClosure { alpha: u64 },
    SubmitFraudProof { request: Vec<u8>, response: Vec<u8>, header: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Transfer,
    Deposit,
    OpenChannel,
    CloseChannel,
    SubmitState,
    ConfirmClosure,
    SubmitFraudProof,
}

impl TxBody {
    pub fn kind(&self) -> TxKind {
        match self {
            TxBody::Transfer { .. } => TxKind::Transfer,
            TxBody::Deposit { .. } => TxKind::Deposit,
            TxBody::OpenChannel { .. } => TxKind::OpenChannel,
            TxBody::CloseChannel { .. } => TxKind::CloseChannel,
            TxBody::SubmitState { .. } => TxKind::SubmitState,
            TxBody::ConfirmClosure { .. } => TxKind::ConfirmClosure,
            TxBody::SubmitFraudProof { .. } => TxKind::SubmitFraudProof,
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            TxBody::Transfer { to, amount } => {
                out.push(0x10);
                out.extend_from_slice(to.as_ref());
                out.extend_from_slice(&amount.to_be_bytes());
            }
            TxBody::Deposit { amount } => {
                out.push(0x11);
                out.extend_from_slice(&amount.to_be_bytes());
            }
            TxBody::OpenChannel { fn_addr, expiry, consent_sig, budget } => {
                out.push(0x12);
                out.extend_from_slice(fn_addr.as_ref());
                out.extend_from_slice(&expiry.to_be_bytes());
                out.extend_from_slice(consent_sig.as_ref());
                out.extend_from_slice(&budget.to_be_bytes());
            }
            TxBody::CloseChannel { alpha, amount, payment_sig } | TxBody::SubmitState { alpha, amount, payment_sig } => {
                out.push(if matches!(self, TxBody::CloseChannel { .. }) { 0x13 } else { 0x14 });
                out.extend_from_slice(&alpha.to_be_bytes());
                out.extend_from_slice(&amount.to_be_bytes());
                out.extend_from_slice(payment_sig.as_ref());
            }
            TxBody::ConfirmClosure { alpha } => {
                out.push(0x15);
                out.extend_from_slice(&alpha.to_be_bytes());
            }
            TxBody::SubmitFraudProof { request, response, header } => {
                out.push(0x16);
                put_bytes(out, request);
                put_bytes(out, response);
                put_bytes(out, header);
            }
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(match r.u8()? {
            0x10 => TxBody::Transfer { to: r.address()?, amount: r.u64()? },
            0x11 => TxBody::Deposit { amount: r.u64()? },
            0x12 => TxBody::OpenChannel {
                fn_addr: r.address()?,
                expiry: r.u64()?,
                consent_sig: r.signature()?,
                budget: r.u64()?,
            },
            0x13 => TxBody::CloseChannel { alpha: r.u64()?, amount: r.u64()?, payment_sig: r.signature()? },
            0x14 => TxBody::SubmitState { alpha: r.u64()?, amount: r.u64()?, payment_sig: r.signature()? },
            0x15 => TxBody::ConfirmClosure { alpha: r.u64()? },
            0x16 => TxBody::SubmitFraudProof {
                request: r.bytes()?.to_vec(),
                response: r.bytes()?.to_vec(),
                header: r.bytes()?.to_vec(),
            },
            other => return Err(CodecError::UnknownTag(other)),
        })
    }
}

/// A transaction signed by its sender: `nonce u64 | body | sig [65]`.
///
/// The sender is recovered from the signature over `digest(nonce ‖ body)`.
/// The nonce only makes otherwise identical transactions distinct; the chain
/// rejects exact replays by transaction hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedTx {
    pub nonce: u64,
    pub body: TxBody,
    pub sig: Signature,
}

impl SignedTx {
    pub fn new(body: TxBody, nonce: u64, key: &PrivateKey) -> Self {
        let sig = sign(&Self::signing_digest(nonce, &body), key);
        Self { nonce, body, sig }
    }

    fn signing_digest(nonce: u64, body: &TxBody) -> Digest {
        let mut out = Vec::new();
        body.encode_into(&mut out);
        digest_concat(&[&nonce.to_be_bytes(), &out])
    }

    pub fn sender(&self) -> Option<Address> {
        recover(&Self::signing_digest(self.nonce, &self.body), &self.sig).ok()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.nonce.to_be_bytes());
        self.body.encode_into(&mut out);
        out.extend_from_slice(self.sig.as_ref());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let nonce = r.u64()?;
        let body = TxBody::decode_from(&mut r)?;
        let sig = r.signature()?;
        r.finish()?;
        Ok(Self { nonce, body, sig })
    }

    pub fn hash(&self) -> Digest {
        digest(&self.encode())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum TxError {
    #[error("signature does not recover a sender")]
    BadSignature,
    #[error("transaction already included")]
    Duplicate,
    #[error("insufficient balance")]
    InsufficientBalance,
    #[error("deposit below the minimum")]
    BelowMinimum,
    #[error("consent not signed by the full node")]
    BadConsent,
    #[error("consent expired")]
    ConsentExpired,
    #[error("full node has no eligible deposit")]
    NodeNotDeposited,
    #[error("channel budget must be positive")]
    ZeroBudget,
    #[error("unknown channel")]
    ChannelUnknown,
    #[error("channel already closed")]
    ChannelClosed,
    #[error("sender is not a channel participant")]
    NotParticipant,
    #[error("payment signature does not recover the client")]
    BadPaymentSig,
    #[error("amount exceeds the channel budget")]
    OverBudget,
    #[error("channel already closing")]
    AlreadyClosing,
    #[error("channel not closing")]
    NotClosing,
    #[error("submitted state is not newer than the recorded one")]
    StaleState,
    #[error("dispute window still open")]
    DisputeWindowOpen,
    #[error("dispute window already closed")]
    DisputeWindowClosed,
    #[error("fraud proof rejected: {0}")]
    FraudProof(FdmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum FdmError {
    #[error("undecodable request or response")]
    Decode,
    #[error("channel id differs between request and response")]
    IdMismatch,
    #[error("unknown channel")]
    ChannelUnknown,
    #[error("channel closed")]
    ChannelClosed,
    #[error("request hash or signature does not check out")]
    RequestIntegrityFail,
    #[error("response does not echo the request")]
    UnlinkedResponse,
    #[error("response not signed by the channel's full node")]
    OriginMismatch,
    #[error("response height outside the block hash window")]
    OutsideWindow,
    #[error("header preimage does not match the recorded block hash")]
    HeaderMismatch,
    #[error("the accused full node cannot act as witness")]
    WitnessIsAccused,
    #[error("no fraud condition holds")]
    ProofRejected,
    #[error("full node has no deposit to slash")]
    NothingToSlash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FraudCondition {
    PaymentMismatch,
    StaleHeight,
    BadProof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub alpha: u64,
    pub lc: Address,
    pub fn_addr: Address,
    pub to_node: u64,
    pub to_client: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlashOutcome {
    pub node: Address,
    pub total: u64,
    pub treasury: u64,
    pub client: u64,
    pub witness: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    Transferred { to: Address, amount: u64 },
    Deposited { total: u64 },
    ChannelOpened { alpha: u64 },
    ChannelClosing { alpha: u64, amount: u64, deadline: u64 },
    StateSubmitted { alpha: u64, amount: u64, deadline: u64 },
    Settled { settlement: Settlement },
    FraudProven { alpha: u64, condition: FraudCondition, slash: SlashOutcome },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxReceipt {
    pub index: u64,
    pub tx_hash: Digest,
    pub kind: TxKind,
    pub sender: Option<Address>,
    pub outcome: Result<Effect, TxError>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub header: BlockHeader,
    pub hash: Digest,
    pub txs: Vec<SignedTx>,
    pub receipts: Vec<TxReceipt>,
    /// Channels settled automatically at the start of this block.
    pub finalized: Vec<Settlement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LookupError {
    #[error("unknown block hash")]
    UnknownHash,
    #[error("block outside the queryable window")]
    OutsideWindow,
    #[error("unknown height")]
    UnknownHeight,
}

/// Initial allocation and parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genesis {
    pub params: ChainParams,
    pub balances: Vec<(Address, u64)>,
    #[serde(default)]
    pub deposits: Vec<(Address, u64)>,
}

/// Outcome of checking a response's proof against a header.
///
/// A malformed transaction payload proves its own error result, so it counts
/// as `Proven`; an unknown-account answer is `NotApplicable` because the trie
/// offers no proofs of absence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProofCheck {
    /// The result is proven by the proof.
    Proven,
    /// The method or result carries no provable claim.
    NotApplicable,
    /// The claim is provably wrong or the proof does not establish it.
    Failed,
}

/// Binds `(call, result, proof)` to the roots in `header`.
///
/// Balances must be proven against the state root under the 20-byte address
/// key; transactions must be proven against the transaction root with the
/// exact submitted payload as value. A payload that does not decode as a
/// transaction is legitimately answered with `MalformedTransaction` and no
/// proof; any other error result for a well-formed payload is a failure.
pub fn check_inclusion(call: &RpcCall, result: &[u8], proof: &[u8], header: &BlockHeader) -> ProofCheck {
    let method = call.method();
    let decoded = RpcResult::decode(method, result);
    match call {
        RpcCall::GetChannelStatus(_) => ProofCheck::NotApplicable,
        RpcCall::GetBalance(addr) => match decoded {
            Ok(RpcResult::Error(ExecError::UnknownAccount)) => ProofCheck::NotApplicable,
            Ok(RpcResult::Balance(balance)) => match verify_encoded_proof(&header.state_root, proof) {
                Some(p) if p.key == addr.as_ref() && p.value == balance.to_be_bytes() => ProofCheck::Proven,
                _ => ProofCheck::Failed,
            },
            _ => ProofCheck::Failed,
        },
        RpcCall::SendTransaction(payload) => {
            if SignedTx::decode(payload).is_err() {
                return match decoded {
                    Ok(RpcResult::Error(ExecError::MalformedTransaction)) => ProofCheck::Proven,
                    _ => ProofCheck::Failed,
                };
            }
            match decoded {
                Ok(RpcResult::TxHash(h)) if h == digest(payload) => {
                    match verify_encoded_proof(&header.tx_root, proof) {
                        Some(p) if p.value == *payload => ProofCheck::Proven,
                        _ => ProofCheck::Failed,
                    }
                }
                _ => ProofCheck::Failed,
            }
        }
    }
}

pub fn encode_balance(balance: u64) -> Vec<u8> {
    balance.to_be_bytes().to_vec()
}

/// The simulated chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    params: ChainParams,
    blocks: Vec<Block>,
    hash_index: BTreeMap<Digest, u64>,
    tx_index: BTreeMap<Digest, (u64, usize)>,
    state_tries: Vec<Trie>,
    tx_tries: Vec<Trie>,
    balances: BTreeMap<Address, u64>,
    deposits: BTreeMap<Address, u64>,
    channels: BTreeMap<u64, PaymentChannel>,
    treasury: u64,
    next_channel_id: u64,
    supply: u128,
    state: Trie,
    touched: BTreeSet<Address>,
}

impl ChainState {
    pub fn new(genesis: Genesis) -> Self {
        let mut balances = BTreeMap::new();
        for (addr, amount) in &genesis.balances {
            *balances.entry(*addr).or_insert(0u64) += amount;
        }
        let mut deposits = BTreeMap::new();
        for (addr, amount) in &genesis.deposits {
            *deposits.entry(*addr).or_insert(0u64) += amount;
        }
        let state: Trie = balances.iter().map(|(a, b)| (*a, encode_balance(*b))).collect();
        let supply = balances.values().chain(deposits.values()).map(|v| u128::from(*v)).sum();
        let header = BlockHeader {
            parent_hash: Digest::default(),
            height: 0,
            state_root: state.root_hash(),
            tx_root: Trie::new().root_hash(),
            timestamp: 0,
        };
        let hash = header.hash();
        let mut hash_index = BTreeMap::new();
        hash_index.insert(hash, 0);
        Self {
            params: genesis.params,
            blocks: alloc::vec![Block { header, hash, txs: Vec::new(), receipts: Vec::new(), finalized: Vec::new() }],
            hash_index,
            tx_index: BTreeMap::new(),
            state_tries: alloc::vec![state.clone()],
            tx_tries: alloc::vec![Trie::new()],
            balances,
            deposits,
            channels: BTreeMap::new(),
            treasury: 0,
            next_channel_id: 1,
            supply,
            state,
            touched: BTreeSet::new(),
        }
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("genesis always present")
    }

    pub fn height(&self) -> u64 {
        self.tip().header.height
    }

    pub fn block(&self, height: u64) -> Option<&Block> {
        self.blocks.get(usize::try_from(height).ok()?)
    }

    pub fn header(&self, height: u64) -> Option<&BlockHeader> {
        self.block(height).map(|b| &b.header)
    }

    pub fn balance(&self, addr: &Address) -> u64 {
        self.balances.get(addr).copied().unwrap_or(0)
    }

    pub fn has_account(&self, addr: &Address) -> bool {
        self.balances.contains_key(addr)
    }

    pub fn deposit(&self, addr: &Address) -> u64 {
        self.deposits.get(addr).copied().unwrap_or(0)
    }

    pub fn is_eligible(&self, addr: &Address) -> bool {
        self.deposit(addr) >= self.params.min_deposit && self.deposit(addr) > 0
    }

    pub fn channel(&self, alpha: u64) -> Option<&PaymentChannel> {
        self.channels.get(&alpha)
    }

    pub fn channels(&self) -> impl Iterator<Item = &PaymentChannel> {
        self.channels.values()
    }

    pub fn treasury(&self) -> u64 {
        self.treasury
    }

    pub fn state_trie_at(&self, height: u64) -> Option<&Trie> {
        self.state_tries.get(usize::try_from(height).ok()?)
    }

    pub fn tx_trie_at(&self, height: u64) -> Option<&Trie> {
        self.tx_tries.get(usize::try_from(height).ok()?)
    }

    /// Height and receipt of an included transaction.
    pub fn receipt(&self, tx_hash: &Digest) -> Option<(u64, &TxReceipt)> {
        let (height, idx) = *self.tx_index.get(tx_hash)?;
        Some((height, &self.block(height)?.receipts[idx]))
    }

    pub fn is_included(&self, tx_hash: &Digest) -> bool {
        self.tx_index.contains_key(tx_hash)
    }

    pub fn get_root_hash(&self, height: u64) -> Result<(Digest, Digest), LookupError> {
        let h = self.header(height).ok_or(LookupError::UnknownHeight)?;
        Ok((h.state_root, h.tx_root))
    }

    /// Heights `tip - hash_window + 1 ..= tip` are queryable.
    pub fn in_hash_window(&self, height: u64) -> bool {
        height <= self.height() && self.height() - height < self.params.hash_window
    }

    pub fn get_block_height_by_hash(&self, hash: &Digest) -> Result<u64, LookupError> {
        let height = *self.hash_index.get(hash).ok_or(LookupError::UnknownHash)?;
        if self.in_hash_window(height) {
            Ok(height)
        } else {
            Err(LookupError::OutsideWindow)
        }
    }

    /// Sum of balances, deposits, funds locked in unsettled channels and
    /// the treasury.
    pub fn total_tokens(&self) -> u128 {
        let locked: u128 = self
            .channels
            .values()
            .filter(|c| c.status != ChannelStatus::Closed)
            .map(|c| u128::from(c.budget))
            .sum();
        self.balances.values().chain(self.deposits.values()).map(|v| u128::from(*v)).sum::<u128>()
            + locked
            + u128::from(self.treasury)
    }

    pub fn conservation_holds(&self) -> bool {
        self.total_tokens() == self.supply
    }

    pub fn produce_block(&mut self, pending: Vec<SignedTx>, timestamp: u64) -> &Block {
        let height = self.height() + 1;
        let parent_hash = self.tip().hash;
        let mut finalized = Vec::new();
        if self.params.auto_finalize {
            let due: Vec<u64> = self
                .channels
                .values()
                .filter(|c| c.status == ChannelStatus::Closing && c.dispute_deadline.is_some_and(|d| d < height))
                .map(|c| c.alpha)
                .collect();
            for alpha in due {
                finalized.push(self.finalize(alpha));
            }
        }

        let mut tx_trie = Trie::new();
        let mut receipts = Vec::with_capacity(pending.len());
        for (i, tx) in pending.iter().enumerate() {
            let encoded = tx.encode();
            let tx_hash = digest(&encoded);
            let sender = tx.sender();
            let outcome = match sender {
                None => Err(TxError::BadSignature),
                Some(_) if self.tx_index.contains_key(&tx_hash) || receipts.iter().any(|r: &TxReceipt| r.tx_hash == tx_hash) => {
                    Err(TxError::Duplicate)
                }
                Some(sender) => self.apply(sender, &tx.body, height),
            };
            tx_trie = tx_trie.insert(&tx_index_key(i as u64), encoded).expect("index keys are short");
            receipts.push(TxReceipt { index: i as u64, tx_hash, kind: tx.body.kind(), sender, outcome });
        }

        for addr in core::mem::take(&mut self.touched) {
            let balance = self.balance(&addr);
            self.state = self.state.insert(addr.as_ref(), encode_balance(balance)).expect("address key");
        }

        let header = BlockHeader {
            parent_hash,
            height,
            state_root: self.state.root_hash(),
            tx_root: tx_trie.root_hash(),
            timestamp,
        };
        let hash = header.hash();
        self.hash_index.insert(hash, height);
        for r in &receipts {
            self.tx_index.entry(r.tx_hash).or_insert((height, r.index as usize));
        }
        self.state_tries.push(self.state.clone());
        self.tx_tries.push(tx_trie);
        self.blocks.push(Block { header, hash, txs: pending, receipts, finalized });
        debug_assert!(self.conservation_holds());
        self.tip()
    }

    fn credit(&mut self, addr: Address, amount: u64) {
        *self.balances.entry(addr).or_insert(0) += amount;
        self.touched.insert(addr);
    }

    fn debit(&mut self, addr: Address, amount: u64) -> Result<(), TxError> {
        let bal = self.balances.get_mut(&addr).ok_or(TxError::InsufficientBalance)?;
        *bal = bal.checked_sub(amount).ok_or(TxError::InsufficientBalance)?;
        self.touched.insert(addr);
        Ok(())
    }

    fn apply(&mut self, sender: Address, body: &TxBody, height: u64) -> Result<Effect, TxError> {
        match body {
            TxBody::Transfer { to, amount } => {
                self.debit(sender, *amount)?;
                self.credit(*to, *amount);
                Ok(Effect::Transferred { to: *to, amount: *amount })
            }
            TxBody::Deposit { amount } => self.fndm_deposit(sender, *amount),
            TxBody::OpenChannel { fn_addr, expiry, consent_sig, budget } => {
                self.cmm_open_channel(sender, *fn_addr, *expiry, consent_sig, *budget, height)
            }
            TxBody::CloseChannel { alpha, amount, payment_sig } => {
                self.cmm_close_channel(sender, *alpha, *amount, payment_sig, height)
            }
            TxBody::SubmitState { alpha, amount, payment_sig } => {
                self.cmm_submit_state(sender, *alpha, *amount, payment_sig, height)
            }
            TxBody::ConfirmClosure { alpha } => {
                let chan = self.channels.get(alpha).ok_or(TxError::ChannelUnknown)?;
                if chan.status != ChannelStatus::Closing {
                    return Err(TxError::NotClosing);
                }
                if chan.dispute_deadline.is_some_and(|d| height <= d) {
                    return Err(TxError::DisputeWindowOpen);
                }
                Ok(Effect::Settled { settlement: self.finalize(*alpha) })
            }
            TxBody::SubmitFraudProof { request, response, header } => self
                .fdm_submit_fraud_proof(sender, request, response, header, height)
                .map_err(TxError::FraudProof),
        }
    }

    fn fndm_deposit(&mut self, sender: Address, amount: u64) -> Result<Effect, TxError> {
        let current = self.deposit(&sender);
        if amount == 0 || current.saturating_add(amount) < self.params.min_deposit {
            return Err(TxError::BelowMinimum);
        }
        self.debit(sender, amount)?;
        let total = current + amount;
        self.deposits.insert(sender, total);
        Ok(Effect::Deposited { total })
    }

    fn cmm_open_channel(
        &mut self,
        lc: Address,
        fn_addr: Address,
        expiry: u64,
        consent_sig: &Signature,
        budget: u64,
        height: u64,
    ) -> Result<Effect, TxError> {
        if !verify(&consent_digest(&lc, expiry), consent_sig, &fn_addr) {
            return Err(TxError::BadConsent);
        }
        if height > expiry {
            return Err(TxError::ConsentExpired);
        }
        if !self.is_eligible(&fn_addr) {
            return Err(TxError::NodeNotDeposited);
        }
        if budget == 0 {
            return Err(TxError::ZeroBudget);
        }
        self.debit(lc, budget)?;
        let alpha = self.next_channel_id;
        self.next_channel_id += 1;
        self.channels.insert(
            alpha,
            PaymentChannel {
                alpha,
                lc,
                fn_addr,
                budget,
                state: PaymentState::default(),
                status: ChannelStatus::Open,
                dispute_deadline: None,
                opened_at: height,
            },
        );
        Ok(Effect::ChannelOpened { alpha })
    }

    fn check_payment(chan: &PaymentChannel, amount: u64, sig: &Signature) -> Result<(), TxError> {
        let empty_close = amount == 0 && sig.is_empty();
        if !empty_close && !verify(&payment_digest(chan.alpha, amount), sig, &chan.lc) {
            return Err(TxError::BadPaymentSig);
        }
        if amount > chan.budget {
            return Err(TxError::OverBudget);
        }
        Ok(())
    }

    fn cmm_close_channel(
        &mut self,
        sender: Address,
        alpha: u64,
        amount: u64,
        sig: &Signature,
        height: u64,
    ) -> Result<Effect, TxError> {
        let window = self.params.dispute_window;
        let chan = self.channels.get_mut(&alpha).ok_or(TxError::ChannelUnknown)?;
        match chan.status {
            ChannelStatus::Closed => return Err(TxError::ChannelClosed),
            ChannelStatus::Closing => return Err(TxError::AlreadyClosing),
            ChannelStatus::Open => {}
        }
        if sender != chan.lc && sender != chan.fn_addr {
            return Err(TxError::NotParticipant);
        }
        Self::check_payment(chan, amount, sig)?;
        let deadline = height + window;
        chan.state = PaymentState { amount, sig: *sig };
        chan.status = ChannelStatus::Closing;
        chan.dispute_deadline = Some(deadline);
        Ok(Effect::ChannelClosing { alpha, amount, deadline })
    }

    fn cmm_submit_state(
        &mut self,
        sender: Address,
        alpha: u64,
        amount: u64,
        sig: &Signature,
        height: u64,
    ) -> Result<Effect, TxError> {
        let window = self.params.dispute_window;
        let chan = self.channels.get_mut(&alpha).ok_or(TxError::ChannelUnknown)?;
        if chan.status != ChannelStatus::Closing {
            return Err(TxError::NotClosing);
        }
        if chan.dispute_deadline.is_some_and(|d| height > d) {
            return Err(TxError::DisputeWindowClosed);
        }
        if sender != chan.lc && sender != chan.fn_addr {
            return Err(TxError::NotParticipant);
        }
        if !verify(&payment_digest(alpha, amount), sig, &chan.lc) {
            return Err(TxError::BadPaymentSig);
        }
        if amount > chan.budget {
            return Err(TxError::OverBudget);
        }
        if amount <= chan.state.amount {
            return Err(TxError::StaleState);
        }
        let deadline = height + window;
        chan.state = PaymentState { amount, sig: *sig };
        chan.dispute_deadline = Some(deadline);
        Ok(Effect::StateSubmitted { alpha, amount, deadline })
    }

    fn finalize(&mut self, alpha: u64) -> Settlement {
        let chan = self.channels.get_mut(&alpha).expect("finalize called on a known channel");
        debug_assert_eq!(chan.status, ChannelStatus::Closing);
        chan.status = ChannelStatus::Closed;
        let settlement = Settlement {
            alpha,
            lc: chan.lc,
            fn_addr: chan.fn_addr,
            to_node: chan.state.amount,
            to_client: chan.budget - chan.state.amount,
        };
        self.credit(settlement.fn_addr, settlement.to_node);
        self.credit(settlement.lc, settlement.to_client);
        settlement
    }

    /// Explicit settlement of a closing channel whose window has passed.
    pub fn cmm_finalize(&mut self, alpha: u64) -> Result<Settlement, TxError> {
        let chan = self.channels.get(&alpha).ok_or(TxError::ChannelUnknown)?;
        if chan.status != ChannelStatus::Closing {
            return Err(TxError::NotClosing);
        }
        if chan.dispute_deadline.is_some_and(|d| self.height() <= d) {
            return Err(TxError::DisputeWindowOpen);
        }
        let s = self.finalize(alpha);
        for addr in core::mem::take(&mut self.touched) {
            let balance = self.balance(&addr);
            self.state = self.state.insert(addr.as_ref(), encode_balance(balance)).expect("address key");
        }
        Ok(s)
    }

    pub fn slash_and_reward(
        &mut self,
        fn_addr: Address,
        lc: Address,
        witness: Address,
    ) -> Result<SlashOutcome, FdmError> {
        let total = self.deposit(&fn_addr);
        if total == 0 {
            return Err(FdmError::NothingToSlash);
        }
        let split = self.params.reward_split;
        let weights = u128::from(split.treasury) + u128::from(split.client) + u128::from(split.witness);
        let share = |w: u64| (u128::from(total) * u128::from(w) / weights.max(1)) as u64;
        let client = share(split.client);
        let witness_share = share(split.witness);
        let treasury = total - client - witness_share;
        self.deposits.insert(fn_addr, 0);
        self.treasury += treasury;
        self.credit(lc, client);
        self.credit(witness, witness_share);
        Ok(SlashOutcome { node: fn_addr, total, treasury, client, witness: witness_share })
    }

    /// Adjudicates a fraud proof forwarded by `witness`. `height` is the
    /// height of the block being produced.
    pub fn fdm_submit_fraud_proof(
        &mut self,
        witness: Address,
        request: &[u8],
        response: &[u8],
        header: &[u8],
        height: u64,
    ) -> Result<Effect, FdmError> {
        let req = ParpRequest::decode(request).map_err(|_| FdmError::Decode)?;
        let res = ParpResponse::decode(response).map_err(|_| FdmError::Decode)?;
        if req.alpha != res.alpha {
            return Err(FdmError::IdMismatch);
        }
        let chan = self.channels.get(&req.alpha).ok_or(FdmError::ChannelUnknown)?.clone();
        if chan.status == ChannelStatus::Closed {
            return Err(FdmError::ChannelClosed);
        }
        if witness == chan.fn_addr {
            return Err(FdmError::WitnessIsAccused);
        }
        let h_req = req.compute_hash();
        if h_req != req.request_hash || !verify(&h_req, &req.request_sig, &chan.lc) {
            return Err(FdmError::RequestIntegrityFail);
        }
        if res.request_hash != h_req || res.request_sig != req.request_sig {
            return Err(FdmError::UnlinkedResponse);
        }
        if !verify(&res.compute_hash(), &res.response_sig, &chan.fn_addr) {
            return Err(FdmError::OriginMismatch);
        }
        if !self.in_hash_window(res.height) {
            return Err(FdmError::OutsideWindow);
        }

        let condition = if req.amount != res.amount {
            FraudCondition::PaymentMismatch
        } else if self.get_block_height_by_hash(&req.block_hash).is_ok_and(|h| res.height < h) {
            FraudCondition::StaleHeight
        } else {
            let header = decode_header(header).map_err(|_| FdmError::HeaderMismatch)?;
            if header.height != res.height || Some(header.hash()) != self.block(res.height).map(|b| b.hash) {
                return Err(FdmError::HeaderMismatch);
            }
            match check_inclusion(&req.call, &res.result, &res.proof, &header) {
                ProofCheck::Failed => FraudCondition::BadProof,
                ProofCheck::Proven | ProofCheck::NotApplicable => return Err(FdmError::ProofRejected),
            }
        };

        let slash = self.slash_and_reward(chan.fn_addr, chan.lc, witness)?;

        let window = self.params.dispute_window;
        let chan = self.channels.get_mut(&req.alpha).expect("checked above");
        let claim_ok = req.amount <= chan.budget && verify(&payment_digest(chan.alpha, req.amount), &req.payment_sig, &chan.lc);
        if claim_ok && req.amount > chan.state.amount {
            chan.state = PaymentState { amount: req.amount, sig: req.payment_sig };
            chan.dispute_deadline = Some(height + window);
        }
        if chan.status == ChannelStatus::Open {
            chan.status = ChannelStatus::Closing;
            chan.dispute_deadline = Some(height + window);
        }
        Ok(Effect::FraudProven { alpha: req.alpha, condition, slash })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use alloc::vec;

    struct Fixture {
        chain: ChainState,
        lc: PrivateKey,
        node: PrivateKey,
        other: PrivateKey,
        nonce: u64,
    }

    impl Fixture {
        fn new(params: ChainParams) -> Self {
            let (lc, _) = keygen(1);
            let (node, _) = keygen(2);
            let (other, _) = keygen(3);
            let chain = ChainState::new(Genesis {
                params,
                balances: vec![(lc.address(), 10_000), (node.address(), 10_000), (other.address(), 10_000)],
                deposits: vec![],
            });
            Self { chain, lc, node, other, nonce: 0 }
        }

        fn tx(&mut self, who: &PrivateKey, body: TxBody) -> SignedTx {
            self.nonce += 1;
            SignedTx::new(body, self.nonce, who)
        }

        fn run(&mut self, txs: Vec<SignedTx>) -> Vec<Result<Effect, TxError>> {
            let ts = self.chain.height() * 10 + 10;
            let block = self.chain.produce_block(txs, ts);
            block.receipts.iter().map(|r| r.outcome).collect()
        }

        fn one(&mut self, who: &PrivateKey, body: TxBody) -> Result<Effect, TxError> {
            let tx = self.tx(who, body);
            self.run(vec![tx]).remove(0)
        }

        fn open(&mut self, budget: u64) -> u64 {
            let node = self.node.clone();
            let lc = self.lc.clone();
            self.one(&node, TxBody::Deposit { amount: 1000 }).unwrap();
            let expiry = self.chain.height() + 10;
            let consent_sig = sign(&consent_digest(&lc.address(), expiry), &node);
            match self.one(&lc, TxBody::OpenChannel { fn_addr: node.address(), expiry, consent_sig, budget }) {
                Ok(Effect::ChannelOpened { alpha }) => alpha,
                other => panic!("open failed: {other:?}"),
            }
        }

        fn pay(&self, alpha: u64, amount: u64) -> Signature {
            sign(&payment_digest(alpha, amount), &self.lc)
        }
    }

    #[test]
    fn empty_block_keeps_state_root() {
        let mut f = Fixture::new(ChainParams::default());
        let before = f.chain.tip().header.state_root;
        f.run(vec![]);
        assert_eq!(f.chain.tip().header.state_root, before);
        assert_eq!(f.chain.height(), 1);
        assert_eq!(f.chain.tip().header.parent_hash, f.chain.block(0).unwrap().hash);
    }

    #[test]
    fn transfer_moves_exact_amount() {
        let mut f = Fixture::new(ChainParams::default());
        let (lc, other) = (f.lc.clone(), f.other.address());
        f.one(&lc, TxBody::Transfer { to: other, amount: 5 }).unwrap();
        assert_eq!(f.chain.balance(&lc.address()), 9_995);
        assert_eq!(f.chain.balance(&other), 10_005);
        let proof = f.chain.state_trie_at(1).unwrap().prove(other.as_ref()).unwrap();
        assert!(crate::trie::verify_proof(&f.chain.tip().header.state_root, &proof));
        assert_eq!(proof.value, encode_balance(10_005));
    }

    #[test]
    fn deposits_accumulate_and_respect_balance() {
        let mut f = Fixture::new(ChainParams { min_deposit: 100, ..Default::default() });
        let node = f.node.clone();
        assert_eq!(f.one(&node, TxBody::Deposit { amount: 100 }), Ok(Effect::Deposited { total: 100 }));
        assert_eq!(f.one(&node, TxBody::Deposit { amount: 50 }), Ok(Effect::Deposited { total: 150 }));
        assert_eq!(f.one(&node, TxBody::Deposit { amount: 20_000 }), Err(TxError::InsufficientBalance));
        let lc = f.lc.clone();
        assert_eq!(f.one(&lc, TxBody::Deposit { amount: 99 }), Err(TxError::BelowMinimum));
        assert_eq!(f.chain.deposit(&node.address()), 150);
    }

    #[test]
    fn open_channel_checks() {
        let mut f = Fixture::new(ChainParams::default());
        let (lc, node, other) = (f.lc.clone(), f.node.clone(), f.other.clone());
        let expiry = 50;
        let good = sign(&consent_digest(&lc.address(), expiry), &node);
        let open = |sig, expiry, budget| TxBody::OpenChannel { fn_addr: node.address(), expiry, consent_sig: sig, budget };
        assert_eq!(f.one(&lc, open(good, expiry, 100)), Err(TxError::NodeNotDeposited));
        f.one(&node, TxBody::Deposit { amount: 1000 }).unwrap();
        let forged = sign(&consent_digest(&lc.address(), expiry), &other);
        assert_eq!(f.one(&lc, open(forged, expiry, 100)), Err(TxError::BadConsent));
        // Next block is height 4; consent expiring at height 3 is stale.
        let expired = sign(&consent_digest(&lc.address(), 3), &node);
        assert_eq!(f.one(&lc, open(expired, 3, 100)), Err(TxError::ConsentExpired));
        assert_eq!(f.one(&lc, open(good, expiry, 0)), Err(TxError::ZeroBudget));
        assert_eq!(f.one(&lc, open(good, expiry, 1000)), Ok(Effect::ChannelOpened { alpha: 1 }));
        assert_eq!(f.chain.balance(&lc.address()), 9_000);
        assert!(f.chain.conservation_holds());
    }

    #[test]
    fn close_dispute_and_settle() {
        let mut f = Fixture::new(ChainParams::default());
        let alpha = f.open(100);
        let (lc, node, other) = (f.lc.clone(), f.node.clone(), f.other.clone());
        let s40 = f.pay(alpha, 40);
        let close_height = f.chain.height() + 1;
        let forged = sign(&payment_digest(alpha, 40), &other);
        assert_eq!(
            f.one(&node, TxBody::CloseChannel { alpha, amount: 40, payment_sig: forged }),
            Err(TxError::BadPaymentSig)
        );
        assert_eq!(
            f.one(&other, TxBody::CloseChannel { alpha, amount: 40, payment_sig: s40 }),
            Err(TxError::NotParticipant)
        );
        let close_height = close_height + 2;
        assert_eq!(
            f.one(&node, TxBody::CloseChannel { alpha, amount: 40, payment_sig: s40 }),
            Ok(Effect::ChannelClosing { alpha, amount: 40, deadline: close_height + 16 })
        );
        assert_eq!(
            f.one(&node, TxBody::CloseChannel { alpha, amount: 40, payment_sig: s40 }),
            Err(TxError::AlreadyClosing)
        );
        let s70 = f.pay(alpha, 70);
        let s69 = f.pay(alpha, 69);
        assert_eq!(f.one(&lc, TxBody::SubmitState { alpha, amount: 70, payment_sig: s69 }), Err(TxError::BadPaymentSig));
        assert_eq!(f.one(&lc, TxBody::SubmitState { alpha, amount: 40, payment_sig: s40 }), Err(TxError::StaleState));
        let submit_height = f.chain.height() + 1;
        assert_eq!(
            f.one(&lc, TxBody::SubmitState { alpha, amount: 70, payment_sig: s70 }),
            Ok(Effect::StateSubmitted { alpha, amount: 70, deadline: submit_height + 16 })
        );
        assert_eq!(f.one(&lc, TxBody::ConfirmClosure { alpha }), Err(TxError::DisputeWindowOpen));
        let lc_before = f.chain.balance(&lc.address());
        let fn_before = f.chain.balance(&node.address());
        while f.chain.channel(alpha).unwrap().status != ChannelStatus::Closed {
            f.run(vec![]);
            assert!(f.chain.conservation_holds());
        }
        assert_eq!(f.chain.height(), submit_height + 17);
        assert_eq!(f.chain.balance(&node.address()), fn_before + 70);
        assert_eq!(f.chain.balance(&lc.address()), lc_before + 30);
        assert_eq!(
            f.one(&lc, TxBody::SubmitState { alpha, amount: 71, payment_sig: f.pay(alpha, 71) }),
            Err(TxError::NotClosing)
        );
    }

    #[test]
    fn budget_boundary_and_empty_close() {
        let mut f = Fixture::new(ChainParams::default());
        let alpha = f.open(100);
        let node = f.node.clone();
        let s101 = f.pay(alpha, 101);
        assert_eq!(f.one(&node, TxBody::CloseChannel { alpha, amount: 101, payment_sig: s101 }), Err(TxError::OverBudget));
        let s100 = f.pay(alpha, 100);
        assert!(f.one(&node, TxBody::CloseChannel { alpha, amount: 100, payment_sig: s100 }).is_ok());

        let alpha2 = f.open(50);
        let lc = f.lc.clone();
        let before = f.chain.balance(&lc.address());
        assert!(f.one(&lc, TxBody::CloseChannel { alpha: alpha2, amount: 0, payment_sig: Signature::EMPTY }).is_ok());
        for _ in 0..17 {
            f.run(vec![]);
        }
        assert_eq!(f.chain.channel(alpha2).unwrap().status, ChannelStatus::Closed);
        assert_eq!(f.chain.balance(&lc.address()), before + 50);
    }

    #[test]
    fn explicit_confirm_without_auto_finalize() {
        let mut f = Fixture::new(ChainParams { auto_finalize: false, dispute_window: 2, ..Default::default() });
        let alpha = f.open(10);
        let node = f.node.clone();
        let s = f.pay(alpha, 4);
        f.one(&node, TxBody::CloseChannel { alpha, amount: 4, payment_sig: s }).unwrap();
        assert_eq!(f.one(&node, TxBody::ConfirmClosure { alpha }), Err(TxError::DisputeWindowOpen));
        f.run(vec![]);
        match f.one(&node, TxBody::ConfirmClosure { alpha }) {
            Ok(Effect::Settled { settlement }) => {
                assert_eq!((settlement.to_node, settlement.to_client), (4, 6));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(f.chain.cmm_finalize(alpha), Err(TxError::NotClosing));
    }

    #[test]
    fn slash_split_with_remainder() {
        for (deposit, expected) in [(99u64, (33u64, 33u64, 33u64)), (100, (34, 33, 33))] {
            let mut f = Fixture::new(ChainParams { min_deposit: 1, ..Default::default() });
            let node = f.node.clone();
            f.one(&node, TxBody::Deposit { amount: deposit }).unwrap();
            let (lc, w) = (f.lc.address(), f.other.address());
            let out = f.chain.slash_and_reward(node.address(), lc, w).unwrap();
            assert_eq!((out.treasury, out.client, out.witness), expected);
            assert_eq!(f.chain.deposit(&node.address()), 0);
            assert!(!f.chain.is_eligible(&node.address()));
            assert!(f.chain.conservation_holds());
            assert_eq!(f.chain.slash_and_reward(node.address(), lc, w), Err(FdmError::NothingToSlash));
        }
    }

    #[test]
    fn duplicate_and_unsigned_transactions_are_rejected() {
        let mut f = Fixture::new(ChainParams::default());
        let lc = f.lc.clone();
        let tx = f.tx(&lc, TxBody::Transfer { to: f.other.address(), amount: 1 });
        let mut forged = tx.clone();
        forged.sig = Signature::EMPTY;
        let out = f.run(vec![tx.clone(), tx.clone(), forged]);
        assert!(out[0].is_ok());
        assert_eq!(out[1], Err(TxError::Duplicate));
        assert_eq!(out[2], Err(TxError::BadSignature));
        assert_eq!(f.run(vec![tx])[0], Err(TxError::Duplicate));
        assert_eq!(f.chain.tx_trie_at(1).unwrap().len(), 3);
    }

    #[test]
    fn hash_window_boundaries() {
        let mut f = Fixture::new(ChainParams::default());
        for _ in 0..300 {
            f.run(vec![]);
        }
        let tip = f.chain.tip().hash;
        assert_eq!(f.chain.get_block_height_by_hash(&tip), Ok(300));
        let aged_255 = f.chain.block(45).unwrap().hash;
        assert_eq!(f.chain.get_block_height_by_hash(&aged_255), Ok(45));
        let aged_256 = f.chain.block(44).unwrap().hash;
        assert_eq!(f.chain.get_block_height_by_hash(&aged_256), Err(LookupError::OutsideWindow));
        let aged_257 = f.chain.block(43).unwrap().hash;
        assert_eq!(f.chain.get_block_height_by_hash(&aged_257), Err(LookupError::OutsideWindow));
        assert_eq!(f.chain.get_block_height_by_hash(&digest(b"nope")), Err(LookupError::UnknownHash));
        assert!(f.chain.get_root_hash(3).is_ok());
        assert_eq!(f.chain.get_root_hash(301), Err(LookupError::UnknownHeight));
    }

    #[test]
    fn signed_tx_round_trip() {
        let (k, a) = keygen(9);
        let bodies = vec![
            TxBody::Transfer { to: a, amount: 3 },
            TxBody::Deposit { amount: 3 },
            TxBody::OpenChannel { fn_addr: a, expiry: 1, consent_sig: Signature::EMPTY, budget: 2 },
            TxBody::CloseChannel { alpha: 1, amount: 2, payment_sig: Signature::EMPTY },
            TxBody::SubmitState { alpha: 1, amount: 2, payment_sig: Signature::EMPTY },
            TxBody::ConfirmClosure { alpha: 4 },
            TxBody::SubmitFraudProof { request: vec![1], response: vec![2, 3], header: vec![] },
        ];
        for body in bodies {
            let tx = SignedTx::new(body, 5, &k);
            assert_eq!(SignedTx::decode(&tx.encode()).unwrap(), tx);
            assert_eq!(tx.sender(), Some(a));
        }
        let transfer = SignedTx::new(TxBody::Transfer { to: a, amount: 1 }, 0, &k);
        assert_eq!(transfer.encode().len(), 102);
    }
}
