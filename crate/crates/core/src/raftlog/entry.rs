//! Primary log entry framing.
//!
//! ```text
//! term(8) | command_id(2) | payload_len(4) | checksum(4) | payload(payload_len)
//! ```
//!
//! All integers are little-endian. The checksum is CRC32C over the first
//! fourteen header bytes followed by the payload.

use super::command::CommandId;

pub const HEADER_LEN: usize = 18;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub term: u64,
    pub command_id: u16,
    pub payload_length: u32,
    pub checksum: u32,
    pub payload: Vec<u8>,
}

fn checksum_of(term: u64, command_id: u16, payload: &[u8]) -> u32 {
    let mut head = [0u8; 14];
    head[..8].copy_from_slice(&term.to_le_bytes());
    head[8..10].copy_from_slice(&command_id.to_le_bytes());
    head[10..14].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    crc32c::crc32c_append(crc32c::crc32c(&head), payload)
}

impl LogEntry {
    pub fn new(term: u64, command_id: u16, payload: Vec<u8>) -> Self {
        let checksum = checksum_of(term, command_id, &payload);
        LogEntry { term, command_id, payload_length: payload.len() as u32, checksum, payload }
    }

    pub fn is_well_formed(&self) -> bool {
        self.payload_length as usize == self.payload.len()
            && self.checksum == checksum_of(self.term, self.command_id, &self.payload)
            && CommandId::from_u16(self.command_id).is_some()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.term.to_le_bytes());
        out.extend_from_slice(&self.command_id.to_le_bytes());
        out.extend_from_slice(&self.payload_length.to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }
}

/// Why a byte range failed to decode as an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Defect {
    TruncatedHeader,
    TruncatedPayload,
    ChecksumMismatch,
    UnknownCommand(u16),
}

/// Decodes one entry from the front of `bytes`, returning it and its length.
pub fn decode_one(bytes: &[u8]) -> Result<(LogEntry, usize), Defect> {
    if bytes.len() < HEADER_LEN {
        return Err(Defect::TruncatedHeader);
    }
    let term = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let command_id = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    let payload_length = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    let checksum = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
    let end = HEADER_LEN + payload_length as usize;
    if bytes.len() < end {
        return Err(Defect::TruncatedPayload);
    }
    let payload = bytes[HEADER_LEN..end].to_vec();
    if checksum_of(term, command_id, &payload) != checksum {
        return Err(Defect::ChecksumMismatch);
    }
    if CommandId::from_u16(command_id).is_none() {
        return Err(Defect::UnknownCommand(command_id));
    }
    Ok((LogEntry { term, command_id, payload_length, checksum, payload }, end))
}

/// Outcome of scanning a primary log image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verification {
    Ok { entries: u64 },
    /// `index` is the 1-based index of the first entry that fails to decode.
    Corrupt { index: u64, offset: u64, defect: Defect },
}

pub fn verify(bytes: &[u8]) -> Verification {
    let mut offset = 0usize;
    let mut index = 0u64;
    while offset < bytes.len() {
        index += 1;
        match decode_one(&bytes[offset..]) {
            Ok((_, len)) => offset += len,
            Err(defect) => return Verification::Corrupt { index, offset: offset as u64, defect },
        }
    }
    Verification::Ok { entries: index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let e = LogEntry::new(1, 5, vec![0xaa, 0xbb]);
        let b = e.encode();
        assert_eq!(b.len(), 20);
        assert_eq!(&b[0..8], &1u64.to_le_bytes());
        assert_eq!(&b[8..10], &[5, 0]);
        assert_eq!(&b[10..14], &[2, 0, 0, 0]);
        assert_eq!(&b[18..], &[0xaa, 0xbb]);
    }

    #[test]
    fn flipped_checksum_field_is_detected() {
        let mut b = LogEntry::new(1, 3, b"x".to_vec()).encode();
        b.extend(LogEntry::new(1, 4, b"yy".to_vec()).encode());
        b[19 + 15] ^= 0x01;
        assert!(matches!(verify(&b), Verification::Corrupt { index: 2, offset: 19, .. }));
    }

    #[test]
    fn unknown_command_is_a_defect() {
        let b = LogEntry::new(1, 999, vec![]).encode();
        assert_eq!(
            verify(&b),
            Verification::Corrupt { index: 1, offset: 0, defect: Defect::UnknownCommand(999) }
        );
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(term in any::<u64>(), id in 1u16..=19, payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let e = LogEntry::new(term, id, payload);
            let bytes = e.encode();
            let (d, len) = decode_one(&bytes).unwrap();
            prop_assert_eq!(len, bytes.len());
            prop_assert_eq!(&d, &e);
            prop_assert_eq!(d.encode(), bytes);
        }

        #[test]
        fn any_single_bit_flip_is_detected(payload in proptest::collection::vec(any::<u8>(), 0..64), bit in any::<prop::sample::Index>()) {
            let e = LogEntry::new(1, 7, payload);
            let mut bytes = e.encode();
            let i = bit.index(bytes.len() * 8);
            bytes[i / 8] ^= 1 << (i % 8);
            let corrupt_at_1 = matches!(verify(&bytes), Verification::Corrupt { index: 1, .. });
            prop_assert!(corrupt_at_1);
        }
    }
}
