//! Security Association database, a small policy filter and the ESP
//! transport-mode datapath.
//!
//! ESP packet layout:
//!
//! ```text
//! | spi (4, BE) | seq (4, BE) | iv (8) = seq as u64 BE | ciphertext | tag (8) |
//! ```
//!
//! The AEAD additional data is `spi | seq`. The 4-byte per-SA salt is the
//! implicit nonce prefix, so each (key, seq) pair yields a unique nonce.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::codec::Envelope;
use crate::crypto::{self, AeadKey, SaKeyPair, AEAD_TAG_LEN, CHILD_KEYMAT_LEN, IV_LEN};
use crate::token::{IpsecMode, IpsecStruct, SecurityProtocol};

pub const ESP_HEADER_LEN: usize = 8 + IV_LEN;
pub const ESP_OVERHEAD: usize = ESP_HEADER_LEN + AEAD_TAG_LEN;
pub const MAX_REPLAY_WINDOW: u32 = 64;
pub const DEFAULT_REPLAY_WINDOW: u32 = 64;
pub const DEFAULT_LIFETIME_S: u64 = 3600;
const DP_LABEL: &[u8] = b"ACE-IPsec-DP";

/// Paths exchanged in the clear before an SA exists.
pub const DEFAULT_BYPASS: [&str; 2] = ["/authz-info", "/ike"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IpsecError {
    #[error("SPI {0:#010x} already in use")]
    SpiCollision(u32),
    #[error("SA lifetime already over")]
    InvalidLifetime,
    #[error("SA expired")]
    Expired,
    #[error("sequence number space exhausted")]
    SeqExhausted,
    #[error("no inbound SA for SPI {0:#010x}")]
    UnknownSpi(u32),
    #[error("replayed or too old sequence number {0}")]
    Replay(u64),
    #[error("ESP authentication failed")]
    AuthFail,
    #[error("ipsec structure carries no seed")]
    MissingSeed,
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("SA used in the wrong direction")]
    WrongDirection,
    #[error("malformed ESP packet")]
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Inbound,
    Outbound,
}

/// Sliding anti-replay window over the last `size` sequence numbers.
///
/// [`check`](Self::check) runs before decryption and
/// [`update`](Self::update) after the packet authenticated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayWindow {
    size: u32,
    highest: u64,
    bitmap: u64,
}

impl Default for ReplayWindow {
    fn default() -> Self {
        ReplayWindow::new(DEFAULT_REPLAY_WINDOW)
    }
}

impl ReplayWindow {
    /// `size` is clamped to `1..=64`.
    pub fn new(size: u32) -> Self {
        ReplayWindow {
            size: size.clamp(1, MAX_REPLAY_WINDOW),
            highest: 0,
            bitmap: 0,
        }
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn highest(&self) -> u64 {
        self.highest
    }

    pub fn check(&self, seq: u64) -> Result<(), IpsecError> {
        if seq == 0 {
            return Err(IpsecError::Replay(seq));
        }
        if seq > self.highest {
            return Ok(());
        }
        let offset = self.highest - seq;
        if offset >= self.size as u64 || self.bitmap & (1u64 << offset) != 0 {
            return Err(IpsecError::Replay(seq));
        }
        Ok(())
    }

    pub fn update(&mut self, seq: u64) {
        if seq > self.highest {
            let shift = seq - self.highest;
            self.bitmap = if shift >= 64 { 0 } else { self.bitmap << shift };
            self.bitmap |= 1;
            self.highest = seq;
        } else {
            let offset = self.highest - seq;
            if offset < self.size as u64 {
                self.bitmap |= 1u64 << offset;
            }
        }
    }

    /// Check and update in one step, for callers without a decrypt stage.
    pub fn accept(&mut self, seq: u64) -> Result<(), IpsecError> {
        self.check(seq)?;
        self.update(seq);
        Ok(())
    }
}

/// SA parameters before they are bound to a direction and a peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaTemplate {
    pub spi: u32,
    pub key: AeadKey,
    pub protocol: SecurityProtocol,
    pub mode: IpsecMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityAssociation {
    pub spi: u32,
    pub direction: Direction,
    pub key: AeadKey,
    pub protocol: SecurityProtocol,
    pub mode: IpsecMode,
    /// Last sequence number sent (outbound).
    pub seq: u64,
    pub replay_window: ReplayWindow,
    pub expires_at: u64,
    pub peer: String,
    pub packets: u64,
    pub bytes: u64,
}

impl SecurityAssociation {
    pub fn new(
        t: SaTemplate,
        direction: Direction,
        peer: impl Into<String>,
        expires_at: u64,
        window: u32,
    ) -> Self {
        SecurityAssociation {
            spi: t.spi,
            direction,
            key: t.key,
            protocol: t.protocol,
            mode: t.mode,
            seq: 0,
            replay_window: ReplayWindow::new(window),
            expires_at,
            peer: peer.into(),
            packets: 0,
            bytes: 0,
        }
    }

    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.expires_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EspPacket {
    pub spi: u32,
    pub seq: u32,
    pub iv8: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
}

impl EspPacket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ESP_HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.spi.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.iv8);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, IpsecError> {
        if b.len() < ESP_OVERHEAD {
            return Err(IpsecError::Malformed);
        }
        Ok(EspPacket {
            spi: u32::from_be_bytes(b[0..4].try_into().expect("4 bytes")),
            seq: u32::from_be_bytes(b[4..8].try_into().expect("4 bytes")),
            iv8: b[8..16].try_into().expect("8 bytes"),
            ciphertext: b[16..].to_vec(),
        })
    }

    pub fn wire_len(&self) -> usize {
        ESP_HEADER_LEN + self.ciphertext.len()
    }

    fn aad(spi: u32, seq: u32) -> [u8; 8] {
        let mut a = [0u8; 8];
        a[..4].copy_from_slice(&spi.to_be_bytes());
        a[4..].copy_from_slice(&seq.to_be_bytes());
        a
    }
}

/// SA database of one endpoint.
#[derive(Debug, Clone)]
pub struct SaDatabase {
    inbound: HashMap<u32, SecurityAssociation>,
    outbound: HashMap<u32, SecurityAssociation>,
    bypass: Vec<String>,
    bypassed_requests: HashSet<(String, u16)>,
}

impl Default for SaDatabase {
    fn default() -> Self {
        SaDatabase::new(DEFAULT_BYPASS.iter().map(|s| s.to_string()).collect())
    }
}

pub fn install_sa(
    db: &mut SaDatabase,
    sa: SecurityAssociation,
    now: u64,
) -> Result<(), IpsecError> {
    db.install(sa, now)
}

impl SaDatabase {
    pub fn new(bypass: Vec<String>) -> Self {
        SaDatabase {
            inbound: HashMap::new(),
            outbound: HashMap::new(),
            bypass,
            bypassed_requests: HashSet::new(),
        }
    }

    pub fn add_bypass(&mut self, prefix: impl Into<String>) {
        self.bypass.push(prefix.into());
    }

    fn table(&self, d: Direction) -> &HashMap<u32, SecurityAssociation> {
        match d {
            Direction::Inbound => &self.inbound,
            Direction::Outbound => &self.outbound,
        }
    }

    pub fn install(&mut self, sa: SecurityAssociation, now: u64) -> Result<(), IpsecError> {
        if sa.is_expired(now) {
            return Err(IpsecError::InvalidLifetime);
        }
        if sa.spi == 0 {
            return Err(IpsecError::SpiCollision(0));
        }
        let table = match sa.direction {
            Direction::Inbound => &mut self.inbound,
            Direction::Outbound => &mut self.outbound,
        };
        if table.contains_key(&sa.spi) {
            return Err(IpsecError::SpiCollision(sa.spi));
        }
        table.insert(sa.spi, sa);
        Ok(())
    }

    /// Installs an inbound/outbound pair atomically: either both or none.
    pub fn install_pair(
        &mut self,
        inbound: SecurityAssociation,
        outbound: SecurityAssociation,
        now: u64,
    ) -> Result<(), IpsecError> {
        if self.inbound.contains_key(&inbound.spi) {
            return Err(IpsecError::SpiCollision(inbound.spi));
        }
        if self.outbound.contains_key(&outbound.spi) {
            return Err(IpsecError::SpiCollision(outbound.spi));
        }
        if inbound.is_expired(now) || outbound.is_expired(now) {
            return Err(IpsecError::InvalidLifetime);
        }
        self.install(inbound, now)?;
        self.install(outbound, now)
    }

    pub fn inbound(&self, spi: u32) -> Option<&SecurityAssociation> {
        self.inbound.get(&spi)
    }

    pub fn outbound(&self, spi: u32) -> Option<&SecurityAssociation> {
        self.outbound.get(&spi)
    }

    pub fn inbound_spi_in_use(&self, spi: u32) -> bool {
        self.inbound.contains_key(&spi)
    }

    pub fn inbound_spis(&self) -> impl Iterator<Item = u32> + '_ {
        self.inbound.keys().copied()
    }

    /// Active outbound SA towards `peer`, highest SPI first for a stable pick.
    pub fn outbound_for(&self, peer: &str, now: u64) -> Option<u32> {
        self.outbound
            .values()
            .filter(|sa| sa.peer == peer && !sa.is_expired(now))
            .map(|sa| sa.spi)
            .max()
    }

    pub fn has_active_inbound_from(&self, peer: &str, now: u64) -> bool {
        self.inbound
            .values()
            .any(|sa| sa.peer == peer && !sa.is_expired(now))
    }

    pub fn remove(&mut self, direction: Direction, spi: u32) -> Option<SecurityAssociation> {
        match direction {
            Direction::Inbound => self.inbound.remove(&spi),
            Direction::Outbound => self.outbound.remove(&spi),
        }
    }

    /// Removes every SA whose lifetime is over and returns them.
    pub fn purge_expired(&mut self, now: u64) -> Vec<SecurityAssociation> {
        let mut gone = Vec::new();
        for table in [&mut self.inbound, &mut self.outbound] {
            let dead: Vec<u32> = table
                .values()
                .filter(|sa| sa.is_expired(now))
                .map(|sa| sa.spi)
                .collect();
            for spi in dead {
                gone.extend(table.remove(&spi));
            }
        }
        gone.sort_by_key(|sa| (sa.direction == Direction::Outbound, sa.spi));
        gone
    }

    pub fn len(&self) -> usize {
        self.inbound.len() + self.outbound.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bypass_path(&self, path: &str) -> bool {
        self.bypass.iter().any(|p| path.starts_with(p.as_str()))
    }

    /// Remembers a request sent in the clear so its response may come back
    /// in the clear too.
    pub fn note_bypassed_request(&mut self, peer: &str, message_id: u16) {
        self.bypassed_requests.insert((peer.to_owned(), message_id));
    }

    pub fn forget_bypassed_request(&mut self, peer: &str, message_id: u16) {
        self.bypassed_requests.remove(&(peer.to_owned(), message_id));
    }

    fn expects_clear_response(&self, peer: &str, message_id: u16) -> bool {
        self.bypassed_requests
            .contains(&(peer.to_owned(), message_id))
    }

    fn table_mut(&mut self, d: Direction) -> &mut HashMap<u32, SecurityAssociation> {
        match d {
            Direction::Inbound => &mut self.inbound,
            Direction::Outbound => &mut self.outbound,
        }
    }

    pub fn lookup(&self, d: Direction, spi: u32) -> Option<&SecurityAssociation> {
        self.table(d).get(&spi)
    }
}

pub fn esp_encap(
    sa: &mut SecurityAssociation,
    plaintext: &[u8],
    now: u64,
) -> Result<EspPacket, IpsecError> {
    if sa.direction != Direction::Outbound {
        return Err(IpsecError::WrongDirection);
    }
    if sa.protocol != SecurityProtocol::Esp {
        return Err(IpsecError::Unsupported("AH datapath"));
    }
    if sa.is_expired(now) {
        return Err(IpsecError::Expired);
    }
    if sa.seq >= u32::MAX as u64 {
        return Err(IpsecError::SeqExhausted);
    }
    sa.seq += 1;
    let seq = sa.seq as u32;
    let iv8 = sa.seq.to_be_bytes();
    let ciphertext = crypto::aead_seal(&sa.key, &iv8, &EspPacket::aad(sa.spi, seq), plaintext);
    sa.packets += 1;
    sa.bytes += plaintext.len() as u64;
    Ok(EspPacket {
        spi: sa.spi,
        seq,
        iv8,
        ciphertext,
    })
}

/// Encapsulates with the outbound SA `spi` of `db`.
pub fn esp_encap_db(
    db: &mut SaDatabase,
    spi: u32,
    plaintext: &[u8],
    now: u64,
) -> Result<EspPacket, IpsecError> {
    let sa = db
        .table_mut(Direction::Outbound)
        .get_mut(&spi)
        .ok_or(IpsecError::UnknownSpi(spi))?;
    esp_encap(sa, plaintext, now)
}

/// Verifies and opens `pkt`; returns the plaintext and the SA's peer.
pub fn esp_decap(
    db: &mut SaDatabase,
    pkt: &EspPacket,
    now: u64,
) -> Result<(Vec<u8>, String), IpsecError> {
    let sa = db
        .table_mut(Direction::Inbound)
        .get_mut(&pkt.spi)
        .ok_or(IpsecError::UnknownSpi(pkt.spi))?;
    if sa.is_expired(now) {
        return Err(IpsecError::Expired);
    }
    let seq = pkt.seq as u64;
    sa.replay_window.check(seq)?;
    if pkt.iv8 != seq.to_be_bytes() {
        return Err(IpsecError::AuthFail);
    }
    let pt = crypto::aead_open(&sa.key, &pkt.iv8, &EspPacket::aad(pkt.spi, pkt.seq), &pkt.ciphertext)
        .map_err(|_| IpsecError::AuthFail)?;
    sa.replay_window.update(seq);
    sa.packets += 1;
    sa.bytes += pt.len() as u64;
    Ok((pt, sa.peer.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdDecision {
    Bypass,
    Protect(u32),
    Discard,
}

/// Input to the policy filter.
#[derive(Debug, Clone, Copy)]
pub enum Traffic<'a> {
    Plain(&'a Envelope),
    Esp(&'a EspPacket),
    /// Bytes that do not parse as either.
    Garbage,
}

/// Policy decision for traffic exchanged with `peer`.
///
/// Inbound: ESP needs a known, live SPI. Clear requests on a bypass path
/// pass, as do clear responses to requests this node sent in the clear.
/// Any other clear traffic is dropped once an SA with the peer exists.
///
/// Outbound: bypass paths stay clear; everything else is protected when an
/// outbound SA to the peer exists.
pub fn spd_filter(
    db: &SaDatabase,
    peer: &str,
    traffic: Traffic<'_>,
    direction: Direction,
    now: u64,
) -> SpdDecision {
    match (direction, traffic) {
        (_, Traffic::Garbage) => SpdDecision::Discard,
        (Direction::Inbound, Traffic::Esp(p)) => match db.inbound(p.spi) {
            Some(sa) if !sa.is_expired(now) => SpdDecision::Protect(p.spi),
            _ => SpdDecision::Discard,
        },
        (Direction::Outbound, Traffic::Esp(p)) => match db.outbound(p.spi) {
            Some(sa) if !sa.is_expired(now) => SpdDecision::Protect(p.spi),
            _ => SpdDecision::Discard,
        },
        (Direction::Inbound, Traffic::Plain(e)) => {
            if e.is_request() && db.is_bypass_path(&e.uri_path) {
                SpdDecision::Bypass
            } else if !e.is_request() && db.expects_clear_response(peer, e.message_id) {
                SpdDecision::Bypass
            } else if db.has_active_inbound_from(peer, now) {
                SpdDecision::Discard
            } else {
                SpdDecision::Bypass
            }
        }
        (Direction::Outbound, Traffic::Plain(e)) => {
            if e.is_request() && db.is_bypass_path(&e.uri_path) {
                return SpdDecision::Bypass;
            }
            match db.outbound_for(peer, now) {
                Some(spi) => SpdDecision::Protect(spi),
                None => SpdDecision::Bypass,
            }
        }
    }
}

/// SA-C and SA-RS templates from a direct-provisioning `ipsec` structure.
pub fn derive_dp_sas(ipsec: &IpsecStruct) -> Result<(SaTemplate, SaTemplate), IpsecError> {
    let seed = ipsec.seed.as_ref().ok_or(IpsecError::MissingSeed)?;
    let (spi_c, spi_rs) = match (ipsec.spi_sa_c, ipsec.spi_sa_rs) {
        (Some(c), Some(rs)) => (c, rs),
        _ => return Err(IpsecError::MissingSeed),
    };
    let mut info = Vec::with_capacity(DP_LABEL.len() + 8);
    info.extend_from_slice(DP_LABEL);
    info.extend_from_slice(&spi_c.to_be_bytes());
    info.extend_from_slice(&spi_rs.to_be_bytes());
    let keymat = crypto::prf_plus(seed, &info, CHILD_KEYMAT_LEN).expect("40 bytes is in range");
    let keys = SaKeyPair::from_keymat(&keymat).expect("40 bytes of keymat");
    Ok(templates(keys, spi_c, spi_rs, ipsec))
}

/// Builds the SA-C/SA-RS templates from a key pair and the two SPIs.
pub fn templates(
    keys: SaKeyPair,
    spi_c: u32,
    spi_rs: u32,
    ipsec: &IpsecStruct,
) -> (SaTemplate, SaTemplate) {
    (
        SaTemplate {
            spi: spi_c,
            key: keys.sa_c,
            protocol: ipsec.protocol,
            mode: ipsec.mode,
        },
        SaTemplate {
            spi: spi_rs,
            key: keys.sa_rs,
            protocol: ipsec.protocol,
            mode: ipsec.mode,
        },
    )
}
