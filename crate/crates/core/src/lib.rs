//! Core of the paid, accountable RPC protocol between light clients and
//! full nodes: cryptography, wire formats, Merkle tries, the simulated chain
//! with its on-chain modules, both off-chain roles and a deterministic
//! network simulator.
//!
//! The crate is `no_std` with `alloc`; IO and file formats live in the `parp`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod chain;
pub mod codec;
pub mod crypto;
pub mod fullnode;
pub mod lightclient;
pub mod simnet;
pub mod trie;

pub use chain::{BlockHeader, ChainParams, ChainState, Genesis, SignedTx, TxBody};
pub use codec::{Method, ParpRequest, ParpResponse, RpcCall, RpcResult};
pub use crypto::{Address, Digest, PrivateKey, Signature};
