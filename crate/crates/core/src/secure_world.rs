//! Minimal secure-world key store: image registration, integrity check and
//! decryption of staged sandbox images, plus driver digests.
//!
//! Integrity uses a 64-bit FNV-1a digest and "encryption" is a keyed XOR
//! keystream. Both are deterministic stand-ins: they exercise the protocol,
//! not cryptographic strength. A random single-byte change is always caught
//! (FNV-1a is a bijection on each input byte at a fixed position), but
//! crafted collisions are trivially possible.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::DevId;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn digest64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Streaming FNV-1a; also used for canonical state digests.
#[derive(Debug, Clone, Copy)]
pub struct FnvHasher(u64);

impl Default for FnvHasher {
    fn default() -> Self {
        FnvHasher(FNV_OFFSET)
    }
}

impl Hasher for FnvHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub app_id: String,
    pub digest: u64,
    pub key_id: KeyId,
    /// Digest bound to the key id.
    pub signature: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncryptedImage {
    pub app_id: String,
    pub payload: Vec<u8>,
    pub encrypted: bool,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SecureStore {
    master_secret: u64,
    records: BTreeMap<String, ImageRecord>,
    drivers: BTreeMap<DevId, u64>,
    next_key: u32,
}

impl fmt::Debug for SecureStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureStore")
            .field("records", &self.records)
            .field("drivers", &self.drivers)
            .finish_non_exhaustive()
    }
}

impl SecureStore {
    pub fn new(master_secret: u64) -> Self {
        Self {
            master_secret,
            records: BTreeMap::new(),
            drivers: BTreeMap::new(),
            next_key: 1,
        }
    }

    fn sign(&self, digest: u64, key: KeyId) -> u64 {
        let mut h = FnvHasher::default();
        h.write_u64(digest);
        h.write_u32(key.0);
        h.write_u64(self.master_secret);
        h.finish()
    }

    fn keystream(&self, key: KeyId, data: &mut [u8]) {
        let mut state = self.master_secret ^ (u64::from(key.0) << 32 | 0x5a5a);
        for chunk in data.chunks_mut(8) {
            let ks = splitmix64(&mut state).to_le_bytes();
            for (b, k) in chunk.iter_mut().zip(ks) {
                *b ^= k;
            }
        }
    }

    pub fn register_image(&mut self, app_id: &str, payload: &[u8]) -> Result<ImageRecord> {
        if self.records.contains_key(app_id) {
            return Err(Error::DuplicateApp(app_id.to_string()));
        }
        let key_id = KeyId(self.next_key);
        self.next_key += 1;
        let digest = digest64(payload);
        let record = ImageRecord {
            app_id: app_id.to_string(),
            digest,
            key_id,
            signature: self.sign(digest, key_id),
        };
        self.records.insert(app_id.to_string(), record.clone());
        Ok(record)
    }

    pub fn record(&self, app_id: &str) -> Option<&ImageRecord> {
        self.records.get(app_id)
    }

    pub fn is_registered(&self, app_id: &str) -> bool {
        self.records.contains_key(app_id)
    }

    /// Packs a payload into the encrypted form staged by the rich OS.
    pub fn encrypt(&self, app_id: &str, payload: &[u8]) -> Result<EncryptedImage> {
        let rec = self
            .records
            .get(app_id)
            .ok_or_else(|| Error::UnknownApp(app_id.to_string()))?;
        let mut data = payload.to_vec();
        self.keystream(rec.key_id, &mut data);
        Ok(EncryptedImage {
            app_id: app_id.to_string(),
            payload: data,
            encrypted: true,
        })
    }

    /// Returns the plaintext iff its digest and signature match the record.
    /// Never mutates the store.
    pub fn verify_and_decrypt(&self, image: &EncryptedImage) -> Result<Vec<u8>> {
        let rec = self
            .records
            .get(&image.app_id)
            .ok_or_else(|| Error::UnknownApp(image.app_id.clone()))?;
        let mut plain = image.payload.clone();
        if image.encrypted {
            self.keystream(rec.key_id, &mut plain);
        }
        let digest = digest64(&plain);
        if digest != rec.digest || self.sign(digest, rec.key_id) != rec.signature {
            return Err(Error::Integrity(image.app_id.clone()));
        }
        Ok(plain)
    }

    pub fn register_driver(&mut self, dev: DevId, blob: &[u8]) {
        self.drivers.insert(dev, digest64(blob));
    }

    pub fn verify_driver(&self, dev: DevId, blob: &[u8]) -> Result<()> {
        match self.drivers.get(&dev) {
            Some(&d) if d == digest64(blob) => Ok(()),
            Some(_) => Err(Error::Integrity(format!("driver:{dev}"))),
            None => Err(Error::UnknownDevice(dev)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(digest64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(digest64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(digest64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn register_records_digest() {
        let mut s = SecureStore::new(7);
        let rec = s.register_image("demo", b"payload").unwrap();
        assert_eq!(rec.digest, digest64(b"payload"));
        assert_eq!(
            s.register_image("demo", b"x"),
            Err(Error::DuplicateApp("demo".into()))
        );
    }

    #[test]
    fn identical_payloads_get_distinct_keys() {
        let mut s = SecureStore::new(7);
        let a = s.register_image("a", b"same").unwrap();
        let b = s.register_image("b", b"same").unwrap();
        assert_ne!(a.key_id, b.key_id);
        assert_eq!(a.digest, b.digest);
    }

    #[test]
    fn round_trip_and_tamper() {
        let mut s = SecureStore::new(99);
        s.register_image("demo", b"sandbox kernel + app").unwrap();
        let img = s.encrypt("demo", b"sandbox kernel + app").unwrap();
        assert_ne!(img.payload, b"sandbox kernel + app");
        assert_eq!(s.verify_and_decrypt(&img).unwrap(), b"sandbox kernel + app");
        let before = s.clone();
        let mut bad = img.clone();
        bad.payload[3] ^= 0x40;
        assert_eq!(
            s.verify_and_decrypt(&bad),
            Err(Error::Integrity("demo".into()))
        );
        assert_eq!(s, before);
        let unknown = EncryptedImage {
            app_id: "ghost".into(),
            payload: vec![],
            encrypted: true,
        };
        assert_eq!(
            s.verify_and_decrypt(&unknown),
            Err(Error::UnknownApp("ghost".into()))
        );
    }

    #[test]
    fn debug_output_hides_master_secret() {
        let s = SecureStore::new(0xdead_beef_cafe_f00d);
        let dbg = format!("{s:?}");
        assert!(!dbg.contains("dead") && !dbg.contains("master"));
    }

    #[test]
    fn drivers_are_digest_checked() {
        let mut s = SecureStore::new(1);
        s.register_driver(DevId(1), b"wifi.ko");
        assert!(s.verify_driver(DevId(1), b"wifi.ko").is_ok());
        assert!(matches!(
            s.verify_driver(DevId(1), b"wifi.ko+rootkit"),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn ten_thousand_single_byte_mutations_are_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1eaf);
        let mut s = SecureStore::new(rng.gen());
        for i in 0..10_000 {
            let app = format!("app{i}");
            let len = rng.gen_range(1..256);
            let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            s.register_image(&app, &payload).unwrap();
            let mut img = s.encrypt(&app, &payload).unwrap();
            let pos = rng.gen_range(0..len);
            let flip: u8 = rng.gen_range(1..=255);
            img.payload[pos] ^= flip;
            assert!(
                s.verify_and_decrypt(&img).is_err(),
                "mutation {i} undetected"
            );
        }
    }

    proptest! {
        #[test]
        fn decrypt_inverts_encrypt(secret: u64, payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let mut s = SecureStore::new(secret);
            s.register_image("p", &payload).unwrap();
            let img = s.encrypt("p", &payload).unwrap();
            prop_assert_eq!(s.verify_and_decrypt(&img).unwrap(), payload);
        }
    }
}
