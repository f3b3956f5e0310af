//! Length-prefixed binary framing between simulation clients and the training server.
//!
//! Every frame is a little-endian `u32` payload length followed by the payload.
//! The payload starts with a one-byte tag and carries the message fields in
//! declaration order, little-endian, `f64` as IEEE-754 binary64:
//!
//! | tag | message | fields                                         | payload bytes |
//! |-----|---------|------------------------------------------------|---------------|
//! | 0   | Hello   | sim_id u32, rho f64, dt f64, n_steps u32       | 25            |
//! | 1   | Step    | sim_id u32, t u32, x f64, y f64, z f64         | 33            |
//! | 2   | Bye     | sim_id u32                                     | 5             |
//!
//! A `Bye` carrying [`CONTROL_SIM_ID`] as the first and only message of a
//! connection is the launcher's ensemble-finished signal.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::lorenz::{Sample, State};

/// Reserved simulation id of the launcher's control connection.
pub const CONTROL_SIM_ID: u32 = u32::MAX;

pub const TAG_HELLO: u8 = 0;
pub const TAG_STEP: u8 = 1;
pub const TAG_BYE: u8 = 2;

pub const HELLO_PAYLOAD_LEN: usize = 1 + 4 + 8 + 8 + 4;
pub const STEP_PAYLOAD_LEN: usize = 1 + 4 + 4 + 8 * 3;
pub const BYE_PAYLOAD_LEN: usize = 1 + 4;
/// No valid payload is longer than a Step.
pub const MAX_PAYLOAD_LEN: usize = STEP_PAYLOAD_LEN;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Hello {
        sim_id: u32,
        rho: f64,
        dt: f64,
        n_steps: u32,
    },
    Step {
        sim_id: u32,
        t: u32,
        x: f64,
        y: f64,
        z: f64,
    },
    Bye {
        sim_id: u32,
    },
}

impl Message {
    pub fn sim_id(&self) -> u32 {
        match *self {
            Message::Hello { sim_id, .. } | Message::Step { sim_id, .. } | Message::Bye { sim_id } => {
                sim_id
            }
        }
    }

    pub fn step(sim_id: u32, t: u32, s: State) -> Self {
        Message::Step {
            sim_id,
            t,
            x: s.x,
            y: s.y,
            z: s.z,
        }
    }

    fn payload_len(&self) -> usize {
        match self {
            Message::Hello { .. } => HELLO_PAYLOAD_LEN,
            Message::Step { .. } => STEP_PAYLOAD_LEN,
            Message::Bye { .. } => BYE_PAYLOAD_LEN,
        }
    }
}

/// Appends the framed message to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    out.reserve(4 + msg.payload_len());
    out.extend_from_slice(&(msg.payload_len() as u32).to_le_bytes());
    match *msg {
        Message::Hello {
            sim_id,
            rho,
            dt,
            n_steps,
        } => {
            out.push(TAG_HELLO);
            out.extend_from_slice(&sim_id.to_le_bytes());
            out.extend_from_slice(&rho.to_le_bytes());
            out.extend_from_slice(&dt.to_le_bytes());
            out.extend_from_slice(&n_steps.to_le_bytes());
        }
        Message::Step { sim_id, t, x, y, z } => {
            out.push(TAG_STEP);
            out.extend_from_slice(&sim_id.to_le_bytes());
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
            out.extend_from_slice(&z.to_le_bytes());
        }
        Message::Bye { sim_id } => {
            out.push(TAG_BYE);
            out.extend_from_slice(&sim_id.to_le_bytes());
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + msg.payload_len());
    encode_into(msg, &mut out);
    out
}

struct Fields<'a>(&'a [u8]);

impl Fields<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        head.try_into().expect("length checked by caller")
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Decodes a payload (tag and fields, without the length prefix).
pub fn decode_payload(payload: &[u8]) -> Result<Message, ProtocolError> {
    let Some((&tag, _)) = payload.split_first() else {
        return Err(ProtocolError::MalformedFrame("empty payload".into()));
    };
    let expected = match tag {
        TAG_HELLO => HELLO_PAYLOAD_LEN,
        TAG_STEP => STEP_PAYLOAD_LEN,
        TAG_BYE => BYE_PAYLOAD_LEN,
        other => return Err(ProtocolError::MalformedFrame(format!("unknown tag {other}"))),
    };
    if payload.len() != expected {
        return Err(ProtocolError::MalformedFrame(format!(
            "tag {tag} needs a {expected}-byte payload, got {}",
            payload.len()
        )));
    }
    let mut f = Fields(&payload[1..]);
    Ok(match tag {
        TAG_HELLO => Message::Hello {
            sim_id: f.u32(),
            rho: f.f64(),
            dt: f.f64(),
            n_steps: f.u32(),
        },
        TAG_STEP => Message::Step {
            sim_id: f.u32(),
            t: f.u32(),
            x: f.f64(),
            y: f.f64(),
            z: f.f64(),
        },
        _ => Message::Bye { sim_id: f.u32() },
    })
}

/// Decodes exactly one complete frame (length prefix included).
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::MalformedFrame(format!(
            "truncated length prefix ({} bytes)",
            bytes.len()
        )));
    }
    let (prefix, payload) = bytes.split_at(4);
    let declared = u32::from_le_bytes(prefix.try_into().expect("4 bytes")) as usize;
    if declared != payload.len() {
        return Err(ProtocolError::MalformedFrame(format!(
            "declared length {declared} but {} payload bytes present",
            payload.len()
        )));
    }
    decode_payload(payload)
}

/// Reads one frame from a byte stream. `Ok(None)` means a clean end of stream
/// at a frame boundary.
pub fn read_frame<R: Read + ?Sized>(reader: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(ProtocolError::MalformedFrame(
                    "stream ended inside a length prefix".into(),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if len == 0 || len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::MalformedFrame(format!("implausible frame length {len}")));
    }
    let mut payload = [0u8; MAX_PAYLOAD_LEN];
    reader.read_exact(&mut payload[..len]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            ProtocolError::MalformedFrame(format!("stream ended inside a {len}-byte payload"))
        }
        _ => ProtocolError::Io(e),
    })?;
    decode_payload(&payload[..len]).map(Some)
}

pub fn write_frame<W: Write + ?Sized>(writer: &mut W, msg: &Message) -> io::Result<()> {
    writer.write_all(&encode(msg))
}

/// Decodes every frame of a buffer, failing on trailing bytes.
pub fn decode_stream(mut bytes: &[u8]) -> Result<Vec<Message>, ProtocolError> {
    let mut out = Vec::new();
    while let Some(msg) = read_frame(&mut bytes)? {
        out.push(msg);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PairerState {
    AwaitHello,
    Streaming {
        sim_id: u32,
        rho: f64,
        dt: f64,
        n_steps: u32,
        next_t: u32,
        pending: Option<State>,
    },
    Finished { sim_id: u32 },
}

/// Per-connection state machine turning consecutive `Step`s into [`Sample`]s.
///
/// Holds at most one unpaired state, whatever the trajectory length.
#[derive(Debug, Clone)]
pub struct StepPairer {
    state: PairerState,
}

impl Default for StepPairer {
    fn default() -> Self {
        Self::new()
    }
}

impl StepPairer {
    pub fn new() -> Self {
        Self {
            state: PairerState::AwaitHello,
        }
    }

    pub fn sim_id(&self) -> Option<u32> {
        match self.state {
            PairerState::AwaitHello => None,
            PairerState::Streaming { sim_id, .. } | PairerState::Finished { sim_id } => Some(sim_id),
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self.state {
            PairerState::Streaming { rho, .. } => Some(rho),
            _ => None,
        }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, PairerState::Finished { .. })
    }

    /// True while a state has been received that has not been paired yet.
    pub fn has_pending(&self) -> bool {
        matches!(self.state, PairerState::Streaming { pending: Some(_), .. })
    }

    pub fn feed(&mut self, msg: Message) -> Result<Option<Sample>, ProtocolError> {
        let violation = |m: String| Err(ProtocolError::ProtocolViolation(m));
        match (&mut self.state, msg) {
            (
                PairerState::AwaitHello,
                Message::Hello {
                    sim_id,
                    rho,
                    dt,
                    n_steps,
                },
            ) => {
                if sim_id == CONTROL_SIM_ID {
                    return violation("Hello uses the reserved control sim_id".into());
                }
                if !rho.is_finite() || !(dt.is_finite() && dt > 0.0) || n_steps < 2 {
                    return violation(format!(
                        "invalid Hello (rho={rho}, dt={dt}, n_steps={n_steps})"
                    ));
                }
                self.state = PairerState::Streaming {
                    sim_id,
                    rho,
                    dt,
                    n_steps,
                    next_t: 0,
                    pending: None,
                };
                Ok(None)
            }
            (PairerState::AwaitHello, other) => violation(format!("{other:?} before Hello")),
            (
                PairerState::Streaming {
                    sim_id,
                    rho,
                    dt,
                    n_steps,
                    next_t,
                    pending,
                },
                msg,
            ) => match msg {
                Message::Hello { .. } => violation("duplicate Hello".into()),
                Message::Step {
                    sim_id: id,
                    t,
                    x,
                    y,
                    z,
                } => {
                    if id != *sim_id {
                        return violation(format!("Step for sim {id} on connection of sim {sim_id}"));
                    }
                    if t != *next_t {
                        return violation(format!("Step t={t}, expected t={next_t}"));
                    }
                    if t >= *n_steps {
                        return violation(format!("Step t={t} beyond n_steps={n_steps}"));
                    }
                    let current = State::new(x, y, z);
                    if !current.is_finite() {
                        return violation(format!("non-finite state at t={t}"));
                    }
                    *next_t += 1;
                    Ok(pending
                        .replace(current)
                        .map(|prev| Sample::from_pair(*rho, prev, current, *dt)))
                }
                Message::Bye { sim_id: id } => {
                    if id != *sim_id {
                        return violation(format!("Bye for sim {id} on connection of sim {sim_id}"));
                    }
                    if *next_t != *n_steps {
                        return violation(format!(
                            "Bye after {next_t} of {n_steps} announced steps"
                        ));
                    }
                    self.state = PairerState::Finished { sim_id: id };
                    Ok(None)
                }
            },
            (PairerState::Finished { .. }, other) => violation(format!("{other:?} after Bye")),
        }
    }
}

/// Pairs a complete, protocol-conformant message sequence into samples.
pub fn pair_steps<I>(messages: I) -> Result<Vec<Sample>, ProtocolError>
where
    I: IntoIterator<Item = Message>,
{
    let mut pairer = StepPairer::new();
    let mut out = Vec::new();
    for msg in messages {
        out.extend(pairer.feed(msg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bye_encoding_is_bit_exact() {
        assert_eq!(
            encode(&Message::Bye { sim_id: 0 }),
            vec![0x05, 0, 0, 0, 0x02, 0, 0, 0, 0]
        );
    }

    #[test]
    fn step_payload_layout() {
        let bytes = encode(&Message::step(1, 0, State::ZERO));
        assert_eq!(bytes.len(), 4 + 33);
        assert_eq!(&bytes[..4], &33u32.to_le_bytes());
        assert_eq!(bytes[4], TAG_STEP);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &[0; 4]);
        assert!(bytes[13..].iter().all(|&b| b == 0));
    }

    #[test]
    fn hello_layout() {
        let bytes = encode(&Message::Hello {
            sim_id: 7,
            rho: 28.0,
            dt: 0.01,
            n_steps: 2000,
        });
        assert_eq!(bytes.len(), 4 + 25);
        assert_eq!(bytes[4], TAG_HELLO);
        assert_eq!(&bytes[9..17], &28f64.to_le_bytes());
        assert_eq!(&bytes[17..25], &0.01f64.to_le_bytes());
        assert_eq!(&bytes[25..29], &2000u32.to_le_bytes());
    }

    #[test]
    fn malformed_frames() {
        let mut bad_tag = encode(&Message::Bye { sim_id: 1 });
        bad_tag[4] = 9;
        assert!(matches!(decode(&bad_tag), Err(ProtocolError::MalformedFrame(_))));

        let short_step = [3, 0, 0, 0, TAG_STEP, 0, 0];
        assert!(matches!(decode(&short_step), Err(ProtocolError::MalformedFrame(_))));

        let step = encode(&Message::step(1, 2, State::new(1.0, 2.0, 3.0)));
        assert!(matches!(decode(&step[..step.len() - 1]), Err(ProtocolError::MalformedFrame(_))));
        assert!(matches!(decode(&step[..2]), Err(ProtocolError::MalformedFrame(_))));
        assert!(matches!(decode(&[]), Err(ProtocolError::MalformedFrame(_))));
    }

    #[test]
    fn stream_reader_handles_truncation() {
        let mut bytes = encode(&Message::Bye { sim_id: 3 });
        bytes.extend_from_slice(&encode(&Message::step(3, 0, State::ZERO))[..10]);
        let mut r = &bytes[..];
        assert_eq!(read_frame(&mut r).unwrap(), Some(Message::Bye { sim_id: 3 }));
        assert!(matches!(read_frame(&mut r), Err(ProtocolError::MalformedFrame(_))));
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
        let mut huge: &[u8] = &[0xff, 0xff, 0xff, 0x7f];
        assert!(matches!(read_frame(&mut huge), Err(ProtocolError::MalformedFrame(_))));
    }

    fn hello(n: u32) -> Message {
        Message::Hello {
            sim_id: 4,
            rho: 28.0,
            dt: 0.01,
            n_steps: n,
        }
    }

    #[test]
    fn pairing_inverts_euler_step() {
        let a = State::new(1.0, 1.0, 1.0);
        let b = crate::lorenz::euler_step(&crate::lorenz::LorenzParams::with_rho(28.0), a, 0.01);
        let samples = pair_steps([
            hello(2),
            Message::step(4, 0, a),
            Message::step(4, 1, b),
            Message::Bye { sim_id: 4 },
        ])
        .unwrap();
        assert_eq!(samples.len(), 1);
        let v = samples[0].velocity;
        assert!(v.x.abs() < 1e-12);
        assert!((v.y - 26.0).abs() < 1e-9);
        assert!((v.z + 5.0 / 3.0).abs() < 1e-9);
        assert_eq!(samples[0].state, a);
        assert_eq!(samples[0].rho, 28.0);
    }

    #[test]
    fn long_stream_yields_n_minus_one_samples() {
        let mut msgs = vec![hello(2000)];
        msgs.extend((0..2000).map(|t| Message::step(4, t, State::new(t as f64, 0.0, 1.0))));
        msgs.push(Message::Bye { sim_id: 4 });
        assert_eq!(pair_steps(msgs).unwrap().len(), 1999);
    }

    #[test]
    fn violations() {
        let v = |msgs: Vec<Message>| {
            matches!(pair_steps(msgs), Err(ProtocolError::ProtocolViolation(_)))
        };
        let s = |t| Message::step(4, t, State::ZERO);
        assert!(v(vec![hello(10), s(0), s(1), s(2), s(3), s(5)]));
        assert!(v(vec![s(0)]));
        assert!(v(vec![hello(10), hello(10)]));
        assert!(v(vec![hello(2), s(0), s(1), s(2)]));
        assert!(v(vec![hello(3), s(0), s(1), Message::Bye { sim_id: 4 }]));
        assert!(v(vec![hello(2), s(0), s(1), Message::Bye { sim_id: 4 }, s(2)]));
        assert!(v(vec![hello(2), Message::step(5, 0, State::ZERO)]));
        assert!(v(vec![hello(2), Message::step(4, 0, State::new(f64::NAN, 0.0, 0.0))]));
        assert!(v(vec![Message::Hello { sim_id: CONTROL_SIM_ID, rho: 0.0, dt: 0.1, n_steps: 2 }]));
        assert!(v(vec![Message::Hello { sim_id: 1, rho: 0.0, dt: 0.0, n_steps: 2 }]));
    }

    #[test]
    fn pairer_keeps_one_pending_state() {
        let mut p = StepPairer::new();
        p.feed(hello(5)).unwrap();
        assert!(!p.has_pending());
        assert!(p.feed(Message::step(4, 0, State::ZERO)).unwrap().is_none());
        assert!(p.has_pending());
        assert!(p.feed(Message::step(4, 1, State::ZERO)).unwrap().is_some());
        assert!(p.has_pending());
    }

    fn any_message() -> impl Strategy<Value = Message> {
        let f = any::<f64>();
        prop_oneof![
            (any::<u32>(), f, f, any::<u32>()).prop_map(|(sim_id, rho, dt, n_steps)| {
                Message::Hello { sim_id, rho, dt, n_steps }
            }),
            (any::<u32>(), any::<u32>(), f, f, f)
                .prop_map(|(sim_id, t, x, y, z)| Message::Step { sim_id, t, x, y, z }),
            any::<u32>().prop_map(|sim_id| Message::Bye { sim_id }),
        ]
    }

    fn same_bits(a: &Message, b: &Message) -> bool {
        encode(a) == encode(b)
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(msg in any_message()) {
            let bytes = encode(&msg);
            let back = decode(&bytes).unwrap();
            // Bit equality also covers NaN payloads.
            prop_assert!(same_bits(&msg, &back));
        }

        #[test]
        fn stream_round_trip(msgs in proptest::collection::vec(any_message(), 0..20)) {
            let bytes: Vec<u8> = msgs.iter().flat_map(encode).collect();
            let back = decode_stream(&bytes).unwrap();
            prop_assert_eq!(back.len(), msgs.len());
            for (a, b) in msgs.iter().zip(&back) {
                prop_assert!(same_bits(a, b));
            }
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..80)) {
            let _ = decode(&bytes);
            let _ = decode_stream(&bytes);
        }
    }
}
