use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Incremental SHA-256 producing a lowercase hex digest.
#[derive(Default)]
pub struct Sha256Writer(Sha256);

impl Sha256Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish_hex(self) -> String {
        to_hex(&self.0.finalize())
    }
}

/// Digest of parameter names, shapes and values.
pub fn params_hash(params: &crate::tensor::ParamStore) -> String {
    let mut h = Sha256Writer::new();
    for (_, p) in params.iter() {
        h.update(p.name.as_bytes());
        h.update(&[0]);
        for &d in p.value.shape() {
            h.update(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finish_hex()
}
