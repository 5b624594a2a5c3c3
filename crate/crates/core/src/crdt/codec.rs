//! JSON-lines wire format for operations and heartbeats.
//!
//! One object per line:
//!
//! ```text
//! {"id":{"origin":0,"seq":3},"kind":"move","n":"0:1","new_parent":"root",
//!  "mtype":"up","prio":[3,0],"crit_anc":[],"vc":{"0":3}}
//! ```
//!
//! Fields not used by a kind are omitted. `crit_anc` is written sorted so the
//! encoding of an operation is byte-deterministic.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::clock::VectorClock;
use super::op::{Heartbeat, Message, OpId, OpKind, Operation, Priority};
use crate::tree::{MoveType, NodeId, ReplicaId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("expected an operation, found a heartbeat")]
    UnexpectedHeartbeat,
    #[error("line {line}: {error}")]
    Line { line: usize, error: Box<CodecError> },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
enum WireKind {
    Add,
    Remove,
    Move,
    Hb,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    id: OpId,
    kind: WireKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    new_parent: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mtype: Option<MoveType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prio: Option<(u64, ReplicaId)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crit_anc: Option<Vec<NodeId>>,
    vc: VectorClock,
}

impl WireRecord {
    fn empty(id: OpId, kind: WireKind, vc: VectorClock) -> Self {
        WireRecord { id, kind, n: None, p: None, new_parent: None, mtype: None, prio: None, crit_anc: None, vc }
    }
}

fn to_wire(msg: &Message) -> WireRecord {
    match msg {
        Message::Heartbeat(hb) => {
            WireRecord::empty(OpId { origin: hb.origin, seq: hb.vc.get(hb.origin) }, WireKind::Hb, hb.vc.clone())
        }
        Message::Op(op) => {
            let mut rec;
            match &op.kind {
                OpKind::Add { node, parent } => {
                    rec = WireRecord::empty(op.id, WireKind::Add, op.vc.clone());
                    rec.n = Some(*node);
                    rec.p = Some(*parent);
                }
                OpKind::Remove { node } => {
                    rec = WireRecord::empty(op.id, WireKind::Remove, op.vc.clone());
                    rec.n = Some(*node);
                }
                OpKind::Move { node, new_parent, mtype, crit_anc, prio } => {
                    rec = WireRecord::empty(op.id, WireKind::Move, op.vc.clone());
                    rec.n = Some(*node);
                    rec.new_parent = Some(*new_parent);
                    rec.mtype = Some(*mtype);
                    rec.prio = Some((prio.num, prio.origin));
                    rec.crit_anc = Some(crit_anc.iter().copied().collect());
                }
            }
            rec
        }
    }
}

fn missing(field: &str, kind: WireKind) -> CodecError {
    CodecError::Invalid(format!("field `{field}` is required for kind {kind:?}"))
}

fn from_wire(rec: WireRecord) -> Result<Message, CodecError> {
    if rec.vc.get(rec.id.origin) != rec.id.seq {
        return Err(CodecError::Invalid(format!(
            "vc[{}] = {} does not match seq {}",
            rec.id.origin,
            rec.vc.get(rec.id.origin),
            rec.id.seq
        )));
    }
    let kind = match rec.kind {
        WireKind::Hb => return Ok(Message::Heartbeat(Heartbeat { origin: rec.id.origin, vc: rec.vc })),
        WireKind::Add => OpKind::Add {
            node: rec.n.ok_or_else(|| missing("n", rec.kind))?,
            parent: rec.p.ok_or_else(|| missing("p", rec.kind))?,
        },
        WireKind::Remove => OpKind::Remove { node: rec.n.ok_or_else(|| missing("n", rec.kind))? },
        WireKind::Move => {
            let (num, origin) = rec.prio.ok_or_else(|| missing("prio", rec.kind))?;
            OpKind::Move {
                node: rec.n.ok_or_else(|| missing("n", rec.kind))?,
                new_parent: rec.new_parent.ok_or_else(|| missing("new_parent", rec.kind))?,
                mtype: rec.mtype.ok_or_else(|| missing("mtype", rec.kind))?,
                crit_anc: rec.crit_anc.ok_or_else(|| missing("crit_anc", rec.kind))?.into_iter().collect(),
                prio: Priority { num, origin },
            }
        }
    };
    if rec.id.seq == 0 {
        return Err(CodecError::Invalid("operation seq must start at 1".into()));
    }
    Ok(Message::Op(Operation { id: rec.id, kind, vc: rec.vc }))
}

fn byte_offset(input: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in input.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(input.len());
        }
        offset += l.len() + 1;
    }
    input.len()
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    serde_json::to_vec(&to_wire(msg)).expect("wire records always serialize")
}

pub fn encode_op(op: &Operation) -> Vec<u8> {
    serde_json::to_vec(&to_wire(&Message::Op(op.clone()))).expect("wire records always serialize")
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, CodecError> {
    let rec: WireRecord = serde_json::from_slice(bytes)
        .map_err(|e| CodecError::Parse { offset: byte_offset(bytes, e.line(), e.column()), message: e.to_string() })?;
    from_wire(rec)
}

pub fn decode_op(bytes: &[u8]) -> Result<Operation, CodecError> {
    match decode_message(bytes)? {
        Message::Op(op) => Ok(op),
        Message::Heartbeat(_) => Err(CodecError::UnexpectedHeartbeat),
    }
}

/// Reads a JSON-lines log. Blank lines are skipped.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<Message>, CodecError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CodecError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let msg = decode_message(line.as_bytes()).map_err(|e| CodecError::Line { line: i + 1, error: Box::new(e) })?;
        out.push(msg);
    }
    Ok(out)
}

pub fn write_log<'a, W: Write>(mut writer: W, msgs: impl IntoIterator<Item = &'a Message>) -> std::io::Result<()> {
    for m in msgs {
        writer.write_all(&encode_message(m))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
