//! Canonical binary layout of requests, responses, RPC calls and headers.
//!
//! All integers are fixed-width big-endian. Variable-length fields carry a
//! 4-byte big-endian length prefix. Decoding is strict: truncated input,
//! oversized length prefixes, unknown tags and trailing bytes are all errors,
//! which makes every encoding injective.
//!
//! Request layout (fixed part 210 bytes):
//!
//! ```text
//! alpha u64 | h_B [32] | a u64 | len u32 | gamma .. | h_req [32] | sigma_a [65] | sigma_req [65]
//! ```
//!
//! Response layout (fixed part 186 bytes):
//!
//! ```text
//! alpha u64 | m_B u64 | a u64 | len u32 | result .. | len u32 | proof .. |
//! h_req [32] | sigma_req [65] | sigma_res [65]
//! ```
//!
//! `h_req` is the digest of the request bytes up to and including `gamma`;
//! `h_res` is the digest of the response bytes up to and including
//! `sigma_req`. Both are therefore computed over the exact wire encoding.

use alloc::vec::Vec;

use crate::chain::BlockHeader;
use crate::crypto::{digest, digest_concat, Address, Digest, Signature, ADDRESS_LEN, DIGEST_LEN, SIGNATURE_LEN};

pub const LENGTH_PREFIX_LEN: usize = 4;
/// Request bytes excluding the RPC call payload and its length prefix.
pub const REQUEST_FIXED_LEN: usize = 8 + DIGEST_LEN + 8 + DIGEST_LEN + 2 * SIGNATURE_LEN;
/// Response bytes excluding result, proof and their length prefixes.
pub const RESPONSE_FIXED_LEN: usize = 8 + 8 + 8 + DIGEST_LEN + 2 * SIGNATURE_LEN;
pub const HEADER_LEN: usize = DIGEST_LEN + 8 + DIGEST_LEN + DIGEST_LEN + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("input truncated")]
    Truncated,
    #[error("length prefix exceeds remaining input")]
    BadLengthPrefix,
    #[error("unknown method tag {0:#04x}")]
    UnknownMethodTag(u8),
    #[error("unknown variant tag {0:#04x}")]
    UnknownTag(u8),
    #[error("trailing bytes after message")]
    TrailingBytes,
    #[error("malformed field")]
    Malformed,
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn digest(&mut self) -> Result<Digest, CodecError> {
        Ok(Digest::from_slice(self.take(DIGEST_LEN)?).expect("32 bytes"))
    }

    pub(crate) fn address(&mut self) -> Result<Address, CodecError> {
        Ok(Address::from_slice(self.take(ADDRESS_LEN)?).expect("20 bytes"))
    }

    pub(crate) fn signature(&mut self) -> Result<Signature, CodecError> {
        Ok(Signature::from_slice(self.take(SIGNATURE_LEN)?).expect("65 bytes"))
    }

    pub(crate) fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u32()? as usize;
        if len > self.buf.len() {
            return Err(CodecError::BadLengthPrefix);
        }
        self.take(len)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub(crate) fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::TrailingBytes)
        }
    }
}

pub(crate) fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    let len = u32::try_from(bytes.len()).expect("field longer than 4 GiB");
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(bytes);
}

/// RPC method tags carried as the first byte of `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GetBalance = 0x01,
    SendTransaction = 0x02,
    GetChannelStatus = 0x03,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GetBalance, Method::SendTransaction, Method::GetChannelStatus];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            0x01 => Ok(Method::GetBalance),
            0x02 => Ok(Method::SendTransaction),
            0x03 => Ok(Method::GetChannelStatus),
            other => Err(CodecError::UnknownMethodTag(other)),
        }
    }

    /// Whether honest responses to this method carry an inclusion proof.
    pub fn is_proof_bearing(self) -> bool {
        !matches!(self, Method::GetChannelStatus)
    }
}

/// The RPC call wrapped by a request (`gamma`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RpcCall {
    GetBalance(Address),
    /// Raw transaction payload; validity is decided by the chain.
    SendTransaction(Vec<u8>),
    GetChannelStatus(u64),
}

impl RpcCall {
    pub fn method(&self) -> Method {
        match self {
            RpcCall::GetBalance(_) => Method::GetBalance,
            RpcCall::SendTransaction(_) => Method::SendTransaction,
            RpcCall::GetChannelStatus(_) => Method::GetChannelStatus,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(self.method().tag());
        match self {
            RpcCall::GetBalance(addr) => out.extend_from_slice(addr.as_ref()),
            RpcCall::SendTransaction(payload) => put_bytes(&mut out, payload),
            RpcCall::GetChannelStatus(alpha) => out.extend_from_slice(&alpha.to_be_bytes()),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let call = match Method::from_tag(r.u8()?)? {
            Method::GetBalance => RpcCall::GetBalance(r.address()?),
            Method::SendTransaction => RpcCall::SendTransaction(r.bytes()?.to_vec()),
            Method::GetChannelStatus => RpcCall::GetChannelStatus(r.u64()?),
        };
        r.finish()?;
        Ok(call)
    }
}

/// Structured failure reported in place of a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecError {
    MalformedTransaction = 1,
    UnknownAccount = 2,
    UnknownChannel = 3,
}

const ERROR_MARKER: u8 = 0xEE;

/// Decoded `R(gamma)`. The byte layout depends on the method: an 8-byte
/// balance, a 32-byte transaction hash, or a 1-byte channel status; errors
/// are always the two bytes `0xEE code`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpcResult {
    Balance(u64),
    TxHash(Digest),
    ChannelStatus(u8),
    Error(ExecError),
}

impl RpcResult {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            RpcResult::Balance(b) => b.to_be_bytes().to_vec(),
            RpcResult::TxHash(h) => h.as_ref().to_vec(),
            RpcResult::ChannelStatus(s) => alloc::vec![*s],
            RpcResult::Error(e) => alloc::vec![ERROR_MARKER, *e as u8],
        }
    }

    pub fn decode(method: Method, bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() == 2 && bytes[0] == ERROR_MARKER {
            let err = match bytes[1] {
                1 => ExecError::MalformedTransaction,
                2 => ExecError::UnknownAccount,
                3 => ExecError::UnknownChannel,
                other => return Err(CodecError::UnknownTag(other)),
            };
            return Ok(RpcResult::Error(err));
        }
        match (method, bytes.len()) {
            (Method::GetBalance, 8) => Ok(RpcResult::Balance(u64::from_be_bytes(bytes.try_into().expect("8")))),
            (Method::SendTransaction, DIGEST_LEN) => Ok(RpcResult::TxHash(Digest::from_slice(bytes).expect("32"))),
            (Method::GetChannelStatus, 1) => Ok(RpcResult::ChannelStatus(bytes[0])),
            _ => Err(CodecError::Malformed),
        }
    }
}

/// `req = (alpha, h_B, a, gamma, h_req, sigma_a, sigma_req)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParpRequest {
    pub alpha: u64,
    pub block_hash: Digest,
    pub amount: u64,
    pub call: RpcCall,
    pub request_hash: Digest,
    pub payment_sig: Signature,
    pub request_sig: Signature,
}

impl ParpRequest {
    /// Digest over `alpha ‖ h_B ‖ a ‖ len ‖ gamma` as laid out on the wire.
    pub fn compute_hash(&self) -> Digest {
        let mut out = Vec::with_capacity(64);
        self.write_hashed_prefix(&mut out);
        digest(&out)
    }

    fn write_hashed_prefix(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.alpha.to_be_bytes());
        out.extend_from_slice(self.block_hash.as_ref());
        out.extend_from_slice(&self.amount.to_be_bytes());
        put_bytes(out, &self.call.encode());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(REQUEST_FIXED_LEN + 64);
        self.write_hashed_prefix(&mut out);
        out.extend_from_slice(self.request_hash.as_ref());
        out.extend_from_slice(self.payment_sig.as_ref());
        out.extend_from_slice(self.request_sig.as_ref());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let alpha = r.u64()?;
        let block_hash = r.digest()?;
        let amount = r.u64()?;
        let call = RpcCall::decode(r.bytes()?)?;
        let request_hash = r.digest()?;
        let payment_sig = r.signature()?;
        let request_sig = r.signature()?;
        r.finish()?;
        Ok(Self { alpha, block_hash, amount, call, request_hash, payment_sig, request_sig })
    }
}

/// `res = (alpha, m_B, a, R(gamma), pi_gamma, h_req, sigma_req, sigma_res)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParpResponse {
    pub alpha: u64,
    pub height: u64,
    pub amount: u64,
    pub result: Vec<u8>,
    /// Serialized [`crate::trie::MerkleProof`], empty when none applies.
    pub proof: Vec<u8>,
    pub request_hash: Digest,
    pub request_sig: Signature,
    pub response_sig: Signature,
}

impl ParpResponse {
    /// Digest over every field except `sigma_res`, as laid out on the wire.
    pub fn compute_hash(&self) -> Digest {
        let mut out = Vec::with_capacity(RESPONSE_FIXED_LEN + self.result.len() + self.proof.len());
        self.write_hashed_prefix(&mut out);
        digest(&out)
    }

    fn write_hashed_prefix(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.alpha.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.amount.to_be_bytes());
        put_bytes(out, &self.result);
        put_bytes(out, &self.proof);
        out.extend_from_slice(self.request_hash.as_ref());
        out.extend_from_slice(self.request_sig.as_ref());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RESPONSE_FIXED_LEN + 8 + self.result.len() + self.proof.len());
        self.write_hashed_prefix(&mut out);
        out.extend_from_slice(self.response_sig.as_ref());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let alpha = r.u64()?;
        let height = r.u64()?;
        let amount = r.u64()?;
        let result = r.bytes()?.to_vec();
        let proof = r.bytes()?.to_vec();
        let request_hash = r.digest()?;
        let request_sig = r.signature()?;
        let response_sig = r.signature()?;
        r.finish()?;
        Ok(Self { alpha, height, amount, result, proof, request_hash, request_sig, response_sig })
    }
}

pub fn encode_request(req: &ParpRequest) -> Vec<u8> {
    req.encode()
}

pub fn decode_request(bytes: &[u8]) -> Result<ParpRequest, CodecError> {
    ParpRequest::decode(bytes)
}

pub fn encode_response(res: &ParpResponse) -> Vec<u8> {
    res.encode()
}

pub fn decode_response(bytes: &[u8]) -> Result<ParpResponse, CodecError> {
    ParpResponse::decode(bytes)
}

/// `digest(alpha ‖ a)`, the message covered by `sigma_a`.
pub fn payment_digest(alpha: u64, amount: u64) -> Digest {
    digest_concat(&[&alpha.to_be_bytes(), &amount.to_be_bytes()])
}

/// `digest(LC ‖ expiry)`, the message covered by a full node's consent.
pub fn consent_digest(client: &Address, expiry: u64) -> Digest {
    digest_concat(&[client.as_ref(), &expiry.to_be_bytes()])
}

/// `digest(alpha)`, the message covered by a full node's open receipt.
pub fn receipt_digest(alpha: u64) -> Digest {
    digest(&alpha.to_be_bytes())
}

/// `parent ‖ height ‖ state_root ‖ tx_root ‖ timestamp`, 112 bytes.
pub fn encode_header(h: &BlockHeader) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[0..32].copy_from_slice(h.parent_hash.as_ref());
    out[32..40].copy_from_slice(&h.height.to_be_bytes());
    out[40..72].copy_from_slice(h.state_root.as_ref());
    out[72..104].copy_from_slice(h.tx_root.as_ref());
    out[104..112].copy_from_slice(&h.timestamp.to_be_bytes());
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<BlockHeader, CodecError> {
    let mut r = Reader::new(bytes);
    let header = BlockHeader {
        parent_hash: r.digest()?,
        height: r.u64()?,
        state_root: r.digest()?,
        tx_root: r.digest()?,
        timestamp: r.u64()?,
    };
    r.finish()?;
    Ok(header)
}
