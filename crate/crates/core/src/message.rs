//! Wire format for exchanging final query tokens between agents.
//!
//! ```text
//! magic "QMSG" | version u16 = 1 | agent_role u8 | payload_dtype u8 (0 = f64)
//! frame_index u32 | N_Q u16 | D u16 | N_Q·D f64, row-major
//! ```
//! All integers and floats little-endian.

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::fleet::AgentRole;
use crate::tensor::Tensor;

pub const MESSAGE_MAGIC: [u8; 4] = *b"QMSG";
pub const MESSAGE_VERSION: u16 = 1;
pub const MESSAGE_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMessage {
    pub agent: AgentRole,
    pub frame_index: u32,
    /// `N_Q × D` query tokens.
    pub tokens: Tensor,
}

impl QueryMessage {
    pub fn encoded_len(&self) -> usize {
        MESSAGE_HEADER_LEN + 8 * self.tokens.numel()
    }
}

pub fn encode_message(m: &QueryMessage) -> Result<Vec<u8>> {
    let (nq, d) = m.tokens.dims2("encode_message")?;
    let nq16 = u16::try_from(nq).map_err(|_| Error::DimOverflow(format!("N_Q {nq}")))?;
    let d16 = u16::try_from(d).map_err(|_| Error::DimOverflow(format!("D {d}")))?;
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&MESSAGE_MAGIC);
    out.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
    out.push(m.agent.ordinal());
    out.push(0);
    out.extend_from_slice(&m.frame_index.to_le_bytes());
    out.extend_from_slice(&nq16.to_le_bytes());
    out.extend_from_slice(&d16.to_le_bytes());
    for v in m.tokens.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<QueryMessage> {
    let mut r = Reader::new(bytes);
    r.magic(MESSAGE_MAGIC)?;
    let version = r.u16()?;
    if version != MESSAGE_VERSION {
        return Err(Error::Version {
            expected: MESSAGE_VERSION,
            found: version,
        });
    }
    let role = r.u8()?;
    let agent = AgentRole::from_ordinal(role)
        .ok_or_else(|| Error::Malformed(format!("unknown agent role {role}")))?;
    let dtype = r.u8()?;
    if dtype != 0 {
        return Err(Error::Dtype(dtype));
    }
    let frame_index = r.u32()?;
    let nq = r.u16()? as usize;
    let d = r.u16()? as usize;
    let n = nq * d;
    if r.remaining() < 8 * n {
        return Err(Error::Truncated {
            expected: MESSAGE_HEADER_LEN + 8 * n,
            actual: bytes.len(),
        });
    }
    let data = r.f64s(n)?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(QueryMessage {
        agent,
        frame_index,
        tokens: Tensor::new(&[nq, d], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sample() -> QueryMessage {
        QueryMessage {
            agent: AgentRole::OtherVehicle,
            frame_index: 5,
            tokens: Tensor::randn(&[8, 32], 1.0, &mut Rng::new(1)),
        }
    }

    #[test]
    fn length_and_round_trip() {
        let m = sample();
        let bytes = encode_message(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * 8 * 32);
        assert_eq!(&bytes[..4], b"QMSG");
        assert_eq!(bytes[6], 1);
        let back = decode_message(&bytes).unwrap();
        assert_eq!(back.agent, m.agent);
        assert_eq!(back.frame_index, 5);
        assert!(back.tokens.bit_eq(&m.tokens));
    }

    #[test]
    fn corruptions_are_reported() {
        let bytes = encode_message(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(decode_message(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_message(&bad), Err(Error::Version { found: 2, .. })));
        assert!(matches!(decode_message(&bytes[..100]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_message(&bytes[..10]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_message(&[]), Err(Error::Truncated { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn message_codec_round_trips(
            role in 0u8..5,
            frame in any::<u32>(),
            nq in 1usize..10,
            d in 1usize..10,
            seed in any::<u64>(),
            zero_sign in any::<bool>(),
        ) {
            let mut t = Tensor::randn(&[nq, d], 1e3, &mut Rng::new(seed));
            t.data_mut()[0] = if zero_sign { -0.0 } else { 0.0 };
            let m = QueryMessage { agent: AgentRole::from_ordinal(role).unwrap(), frame_index: frame, tokens: t };
            let bytes = encode_message(&m).unwrap();
            prop_assert_eq!(bytes.len(), m.encoded_len());
            let back = decode_message(&bytes).unwrap();
            prop_assert_eq!(back.agent, m.agent);
            prop_assert_eq!(back.frame_index, m.frame_index);
            prop_assert!(back.tokens.bit_eq(&m.tokens));
        }
    }
}
