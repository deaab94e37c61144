use crate::checkpoint::ModelHash;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IVRB";
pub const VERSION: u16 = 1;
/// Fixed header bytes, including the hyper-segment length.
pub const HEADER_LEN: usize = 30;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub model_hash: ModelHash,
    pub variant: u8,
    pub j: u8,
    pub alpha_num: u16,
    pub alpha_den: u16,
    /// Original (unpadded) image extent.
    pub height: u16,
    pub width: u16,
    pub pad_h: u8,
    pub pad_w: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub hyper_segment: Vec<u8>,
    pub latent_segment: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.hyper_segment.len() + self.latent_segment.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.model_hash);
        out.push(h.variant);
        out.push(h.j);
        out.extend_from_slice(&h.alpha_num.to_le_bytes());
        out.extend_from_slice(&h.alpha_den.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.push(h.pad_h);
        out.push(h.pad_w);
        out.extend_from_slice(&(self.hyper_segment.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.hyper_segment);
        out.extend_from_slice(&self.latent_segment);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode { offset: bytes.len(), msg: "header truncated".into() });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Decode { offset: 0, msg: "bad magic".into() });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Decode { offset: 4, msg: format!("unsupported version {version}") });
        }
        let mut model_hash = [0u8; 8];
        model_hash.copy_from_slice(&bytes[6..14]);
        let header = Header {
            model_hash,
            variant: bytes[14],
            j: bytes[15],
            alpha_num: u16_at(16),
            alpha_den: u16_at(18),
            height: u16_at(20),
            width: u16_at(22),
            pad_h: bytes[24],
            pad_w: bytes[25],
        };
        let hyper_len = u32::from_le_bytes(bytes[26..30].try_into().expect("4 bytes")) as usize;
        if bytes.len() - HEADER_LEN < hyper_len {
            return Err(Error::Decode { offset: bytes.len(), msg: "hyper segment truncated".into() });
        }
        let split = HEADER_LEN + hyper_len;
        Ok(Bitstream {
            header,
            hyper_segment: bytes[HEADER_LEN..split].to_vec(),
            latent_segment: bytes[split..].to_vec(),
        })
    }

    pub fn total_bits(&self) -> usize {
        8 * (HEADER_LEN + self.hyper_segment.len() + self.latent_segment.len())
    }

    /// Bits per pixel of the original image.
    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (self.header.height as f64 * self.header.width as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let bs = Bitstream {
            header: Header {
                model_hash: [1, 2, 3, 4, 5, 6, 7, 8],
                variant: 2,
                j: 8,
                alpha_num: 994,
                alpha_den: 1000,
                height: 500,
                width: 333,
                pad_h: 12,
                pad_w: 3,
            },
            hyper_segment: vec![9; 17],
            latent_segment: vec![4; 40],
        };
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 57);
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
        assert!(Bitstream::from_bytes(&bytes[..HEADER_LEN + 5]).is_err());
        assert!(Bitstream::from_bytes(&bytes[..10]).is_err());
        assert_eq!(bs.total_bits(), 8 * bytes.len());
    }
}
