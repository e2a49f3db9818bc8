//! End-to-end runs of the four setups and the reports built from them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actors::authz::{AsSetup, ClientRegistration, RsRegistration};
use crate::actors::client::ClientSetup;
use crate::actors::resource::RsSetup;
use crate::actors::{
    actor_seed, step, AuthorizationServer, Client, ClientOutcome, Endpoint, Node, Outbound,
    ResourceServer, SpiPool,
};
use crate::codec::Code;
use crate::config::{Config, ConfigError, KeyForm, ModeSetting, ProtocolSetting};
use crate::crypto::{AeadKey, CertificateAuthority, SignKeyPair};
use crate::ipsec::{Direction, SaDatabase, SaTemplate, SecurityAssociation};
use crate::net::{self, NetError, Protocol, SimConfig, SimNetwork, TraceRecord, Transport, UdpNetwork};
use crate::token::{CoseKeyClaim, IpsecMode, Method, SecurityProtocol};

/// Wall-clock limit for one run on the UDP backend.
pub const UDP_RUN_LIMIT: Duration = Duration::from_secs(10);

/// SPIs of the pre-established links to the AS.
const LINK_SPIS: [u32; 4] = [0xffff_ff01, 0xffff_ff02, 0xffff_ff03, 0xffff_ff04];
const LINK_LIFETIME_S: u64 = 10 * 365 * 86_400;
/// Offline root above the AS's issuing authority.
pub const ROOT_CA_NAME: &str = "ace-root";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    Base,
    Dp,
    IkePsk,
    IkeCpk,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::Base,
        ScenarioName::Dp,
        ScenarioName::IkePsk,
        ScenarioName::IkeCpk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Base => "base",
            ScenarioName::Dp => "dp",
            ScenarioName::IkePsk => "ike-psk",
            ScenarioName::IkeCpk => "ike-cpk",
        }
    }

    /// Establishment method at the RS; `None` for the baseline.
    pub fn method(self) -> Option<Method> {
        match self {
            ScenarioName::Base => None,
            ScenarioName::Dp => Some(Method::Dp),
            ScenarioName::IkePsk => Some(Method::IkePsk),
            ScenarioName::IkeCpk => Some(Method::IkeAsym),
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| ScenarioError::Unknown {
                what: "scenario",
                value: s.into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sim,
    Udp,
}

impl FromStr for Backend {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Backend::Sim),
            "udp" => Ok(Backend::Udp),
            _ => Err(ScenarioError::Unknown {
                what: "backend",
                value: s.into(),
            }),
        }
    }
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub success: bool,
    pub failed_step: Option<String>,
    pub reason: Option<String>,
    pub elapsed_ms: u64,
    pub trace: Vec<TraceRecord>,
    /// Size of the sealed token posted in step C.
    pub token_bytes: Option<usize>,
    pub resource: Option<Vec<u8>>,
}

impl RunOutcome {
    pub fn esp_packets(&self) -> usize {
        self.trace.iter().filter(|r| r.protocol == Protocol::Esp).count()
    }

    pub fn steps(&self) -> BTreeMap<String, net::StepTotals> {
        net::summarize(&self.trace)
    }
}

fn kid_of(public: &[u8]) -> Vec<u8> {
    Sha256::digest(public)[..8].to_vec()
}

fn link(spi: u32, key: AeadKey) -> SaTemplate {
    SaTemplate {
        spi,
        key,
        protocol: SecurityProtocol::Esp,
        mode: IpsecMode::Transport,
    }
}

fn install_link(
    a: &mut SaDatabase,
    b: &mut SaDatabase,
    (a_name, b_name): (&str, &str),
    (a_to_b, b_to_a): (u32, u32),
    rng: &mut ChaCha20Rng,
    now: u64,
) {
    let k1 = AeadKey::random(rng);
    let k2 = AeadKey::random(rng);
    let exp = now + LINK_LIFETIME_S;
    let w = crate::ipsec::DEFAULT_REPLAY_WINDOW;
    let sa = |spi, key: &AeadKey, d, peer: &str| SecurityAssociation::new(link(spi, key.clone()), d, peer, exp, w);
    a.install(sa(a_to_b, &k1, Direction::Outbound, b_name), now).expect("fresh database");
    b.install(sa(a_to_b, &k1, Direction::Inbound, a_name), now).expect("fresh database");
    b.install(sa(b_to_a, &k2, Direction::Outbound, a_name), now).expect("fresh database");
    a.install(sa(b_to_a, &k2, Direction::Inbound, b_name), now).expect("fresh database");
}

/// The three actors of one run and the network between them.
pub struct World {
    pub scenario: ScenarioName,
    pub cfg: Config,
    pub authz: AuthorizationServer,
    pub rs: ResourceServer,
    pub client: Client,
    net: Box<dyn Transport>,
    now_ms: u64,
    started: bool,
    wall_start: Instant,
}

impl fmt::Debug for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("World")
            .field("scenario", &self.scenario)
            .field("now_ms", &self.now_ms)
            .finish_non_exhaustive()
    }
}

impl World {
    pub fn new(cfg: &Config, scenario: ScenarioName, seed: u64, run: u32, backend: Backend) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let setup_err = |e: crate::crypto::CryptoError| ScenarioError::Setup(e.to_string());
        let mut rng = ChaCha20Rng::from_seed(actor_seed(seed, run, "setup"));
        let base = cfg.time.base_unix;
        let (as_name, rs_name, client_name) = (
            cfg.authorization_server.name.clone(),
            cfg.resource_server.name.clone(),
            cfg.client.name.clone(),
        );
        let rsc = &cfg.resource_server;
        let asc = &cfg.authorization_server;

        let (nb, na) = (base.saturating_sub(60), base + asc.cert_validity_s);
        let root = CertificateAuthority::new(ROOT_CA_NAME, SignKeyPair::generate(&mut rng));
        let ca = root
            .issue_authority(&as_name, SignKeyPair::generate(&mut rng), 1, nb, na)
            .map_err(setup_err)?;
        let client_key = SignKeyPair::generate(&mut rng);
        let rs_key = SignKeyPair::generate(&mut rng);
        let client_chain = ca.chain(ca.issue(&client_name, client_key.public(), 2, nb, na).map_err(setup_err)?);
        let rs_chain = ca.chain(ca.issue(&rs_name, rs_key.public(), 3, nb, na).map_err(setup_err)?);
        let seal_key = AeadKey::random(&mut rng);

        let protected_links = scenario != ScenarioName::Base;
        let mut as_db = SaDatabase::default();
        let mut rs_db = SaDatabase::default();
        let mut client_db = SaDatabase::default();
        if protected_links {
            install_link(
                &mut client_db,
                &mut as_db,
                (&client_name, &as_name),
                (LINK_SPIS[0], LINK_SPIS[1]),
                &mut rng,
                base,
            );
            install_link(
                &mut rs_db,
                &mut as_db,
                (&rs_name, &as_name),
                (LINK_SPIS[2], LINK_SPIS[3]),
                &mut rng,
                base,
            );
        }

        let addr = |s: &Option<String>| s.as_ref().map(|a| a.as_bytes().to_vec());
        let rs_public = match asc.key_form {
            KeyForm::Certificate => CoseKeyClaim::ec_certificate(kid_of(rs_key.public()), rs_chain)
                .map_err(|e| ScenarioError::Setup(e.to_string()))?,
            KeyForm::Raw => CoseKeyClaim::ec_raw(kid_of(rs_key.public()), rs_key.public().to_vec()),
        };
        let registration = RsRegistration {
            id: rs_name.clone(),
            seal_key: seal_key.clone(),
            method: scenario.method(),
            public_key: Some(rs_public),
            mode: match rsc.mode {
                ModeSetting::Transport => IpsecMode::Transport,
                ModeSetting::Tunnel => IpsecMode::Tunnel,
            },
            protocol: match rsc.protocol {
                ProtocolSetting::Esp => SecurityProtocol::Esp,
                ProtocolSetting::Ah => SecurityProtocol::Ah,
            },
            sa_lifetime_s: rsc.sa_lifetime_s,
            tunnel_src: addr(&rsc.tunnel_src),
            tunnel_dst: addr(&rsc.tunnel_dst),
        };
        let pool = asc.spi_pool.as_ref().map(|p| SpiPool::range(p.start, p.size));
        let authz = AuthorizationServer::new(
            AsSetup {
                name: as_name.clone(),
                rs: vec![registration],
                clients: vec![ClientRegistration {
                    id: client_name.clone(),
                    public_key: Some(client_key.public().to_vec()),
                }],
                policy: cfg.policy.clone(),
                token_lifetime_s: asc.token_lifetime_s,
                spi_pool: pool,
                trust_anchor: root.public().to_vec(),
                require_protection: protected_links,
            },
            Endpoint::new(as_name.clone(), as_db, base, cfg.retransmit.clone()),
            actor_seed(seed, run, &as_name),
        );
        let rs = ResourceServer::new(
            RsSetup {
                name: rs_name.clone(),
                as_name: as_name.clone(),
                seal_key,
                trust_anchor: root.public().to_vec(),
                sign_key: Some(rs_key),
                introspection: rsc.introspection,
                release_spis: rsc.release_spis,
                pool: asc.spi_pool.as_ref().map(|p| p.start..=p.start + (p.size - 1)),
                replay_window: rsc.replay_window,
                resources: rsc
                    .resources
                    .iter()
                    .map(|(k, v)| (k.clone(), v.as_bytes().to_vec()))
                    .collect(),
            },
            Endpoint::new(rs_name.clone(), rs_db, base, cfg.retransmit.clone()),
            actor_seed(seed, run, &rs_name),
        );
        let client = Client::new(
            ClientSetup {
                name: client_name.clone(),
                as_name: as_name.clone(),
                rs_name: rs_name.clone(),
                resource: cfg.client.resource.clone(),
                scope: cfg.client.scope.clone(),
                method: if cfg.client.method == "POST" { Code::Post } else { Code::Get },
                knows_as: cfg.client.knows_as,
                collision_retries: cfg.client.collision_retries,
                sign_key: client_key,
                certificate_chain: client_chain,
                key_form: asc.key_form,
                offer_ec_key: scenario == ScenarioName::IkeCpk,
                trust_anchor: root.public().to_vec(),
                sa_window: rsc.replay_window,
            },
            Endpoint::new(client_name.clone(), client_db, base, cfg.retransmit.clone()),
            actor_seed(seed, run, &client_name),
        );

        let mut net: Box<dyn Transport> = match backend {
            Backend::Sim => {
                let mut s = [0u8; 8];
                s.copy_from_slice(&actor_seed(seed, run, "network")[..8]);
                Box::new(SimNetwork::new(SimConfig {
                    loss_rate: cfg.network.loss,
                    latency_ms: cfg.network.latency_ms,
                    reorder: cfg.network.reorder,
                    rng_seed: u64::from_be_bytes(s),
                    mtu: cfg.network.mtu,
                }))
            }
            Backend::Udp => {
                let ports: HashMap<String, u16> = cfg.network.udp_ports.clone().into_iter().collect();
                Box::new(UdpNetwork::new(ports, cfg.network.mtu))
            }
        };
        for n in [&as_name, &rs_name, &client_name] {
            net.register(n)?;
        }
        Ok(World {
            scenario,
            cfg: cfg.clone(),
            authz,
            rs,
            client,
            net,
            now_ms: 0,
            started: false,
            wall_start: Instant::now(),
        })
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.net.trace()
    }

    fn dispatch(&mut self, out: &mut Vec<Outbound>) -> Result<(), NetError> {
        for o in out.drain(..) {
            self.net.send(self.now_ms, o.datagram, o.meta)?;
        }
        Ok(())
    }

    fn nodes(&mut self) -> [&mut dyn Node; 3] {
        [&mut self.authz, &mut self.rs, &mut self.client]
    }

    /// Kicks off the Client.
    pub fn start(&mut self) -> Result<(), NetError> {
        let mut out = Vec::new();
        self.started = true;
        self.client.start(self.now_ms, &mut out);
        self.dispatch(&mut out)
    }

    /// Drops the Client's channel to the RS and starts a new contact. The
    /// Client keeps what it learned from the AS.
    pub fn new_contact(&mut self) -> Result<(), NetError> {
        self.client.restart();
        let mut out = Vec::new();
        self.started = true;
        self.client.start(self.now_ms, &mut out);
        self.dispatch(&mut out)
    }

    /// Sends datagrams produced outside the actors' own handlers.
    pub fn inject(&mut self, mut out: Vec<Outbound>) -> Result<(), NetError> {
        self.dispatch(&mut out)
    }

    /// Delivers everything due at the current time and runs timers.
    pub fn step(&mut self) -> Result<(), NetError> {
        if let Some(t) = self.net.clock_ms() {
            self.now_ms = self.now_ms.max(t);
        }
        let now = self.now_ms;
        let mut out = Vec::new();
        for i in 0..3 {
            let name = self.nodes()[i].name().to_owned();
            for d in self.net.poll(&name, now)? {
                self.nodes()[i].handle(now, d, &mut out);
                self.dispatch(&mut out)?;
            }
        }
        for i in 0..3 {
            self.nodes()[i].tick(now, &mut out);
            self.dispatch(&mut out)?;
        }
        Ok(())
    }

    /// Earliest pending delivery or timer.
    pub fn next_event(&self) -> Option<u64> {
        [
            self.net.next_event_ms(),
            self.authz.next_timer(),
            self.rs.next_timer(),
            self.client.next_timer(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    /// Moves virtual time forward. Ignored on the wall-clock backend.
    pub fn advance_to(&mut self, t_ms: u64) {
        if self.net.virtual_time() {
            self.now_ms = self.now_ms.max(t_ms);
        }
    }

    /// Runs until the Client has an outcome, nothing is left to do, or the
    /// time limit passes.
    pub fn run(&mut self) -> Result<RunOutcome, NetError> {
        if !self.started {
            self.start()?;
        }
        let limit = self.cfg.time.max_run_ms;
        loop {
            self.step()?;
            if self.client.outcome().is_some() {
                break;
            }
            if self.net.virtual_time() {
                match self.next_event() {
                    Some(t) if t <= limit => self.now_ms = self.now_ms.max(t),
                    _ => break,
                }
            } else {
                if self.wall_start.elapsed() > UDP_RUN_LIMIT {
                    break;
                }
                std::thread::sleep(Duration::from_millis(1));
            }
        }
        Ok(self.outcome())
    }

    fn outcome(&self) -> RunOutcome {
        let expected = self.cfg.resource_server.resources.get(&self.cfg.client.resource);
        let (success, failed_step, reason, resource) = match self.client.outcome() {
            Some(ClientOutcome::Resource(v)) => {
                let ok = expected.is_some_and(|e| e.as_bytes() == v.as_slice());
                let why = (!ok).then(|| "unexpected resource value".to_owned());
                (ok, (!ok).then(|| step::F.to_owned()), why, Some(v.clone()))
            }
            Some(ClientOutcome::Failed { step, reason }) => (false, Some(step.clone()), Some(reason.clone()), None),
            None => (false, Some("timeout".into()), Some("run did not finish".into()), None),
        };
        RunOutcome {
            success,
            failed_step,
            reason,
            elapsed_ms: self.now_ms,
            trace: self.net.trace().to_vec(),
            token_bytes: self.client.last_token_len,
            resource,
        }
    }
}

/// Runs one setup once.
pub fn run_once(cfg: &Config, scenario: ScenarioName, seed: u64, run: u32, backend: Backend) -> Result<RunOutcome, ScenarioError> {
    let mut w = World::new(cfg, scenario, seed, run, backend)?;
    Ok(w.run()?)
}

/// Steps reported for every scenario, in order.
pub const REPORT_STEPS: [&str; 15] = [
    step::PROBE,
    step::PROBE_REPLY,
    step::A,
    step::B,
    step::C,
    step::C_ACK,
    step::D,
    step::E,
    step::IKE1,
    step::IKE2,
    step::IKE3,
    step::IKE4,
    step::IKE_ACK,
    step::F_REQ,
    step::F,
];
/// Label of the access token row.
pub const TOKEN_ROW: &str = "token";
/// Steps counted as channel establishment.
const HANDSHAKE_STEPS: [&str; 7] = [
    step::C,
    step::C_ACK,
    step::IKE1,
    step::IKE2,
    step::IKE3,
    step::IKE4,
    step::IKE_ACK,
];

/// Per-step means over the successful runs of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: String,
    pub bytes: f64,
    pub msgs: f64,
    pub frags: f64,
    pub retx: f64,
    pub wire_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunFailure {
    pub run: u32,
    pub step: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioName,
    pub runs: u32,
    pub successes: u32,
    pub failures: Vec<RunFailure>,
    /// Outcome of each run, in order.
    pub run_success: Vec<bool>,
    pub steps: Vec<StepRow>,
    pub token_bytes: f64,
    pub elapsed_ms: f64,
    pub handshake_msgs: f64,
    pub esp_packets: f64,
    pub retransmissions: f64,
}

impl ScenarioReport {
    pub fn step(&self, label: &str) -> Option<&StepRow> {
        self.steps.iter().find(|r| r.step == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub loss: f64,
    pub backend: Backend,
    pub repeats: u32,
    pub scenarios: Vec<ScenarioReport>,
}

impl Report {
    pub fn all_succeeded(&self) -> bool {
        self.scenarios.iter().all(|s| s.successes == s.runs)
    }

    pub fn scenario(&self, name: ScenarioName) -> Option<&ScenarioReport> {
        self.scenarios.iter().find(|s| s.scenario == name)
    }
}

fn mean(sum: f64, n: u32) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs `scenario` `repeats` times and aggregates the runs.
pub fn run_scenario(
    cfg: &Config,
    scenario: ScenarioName,
    seed: u64,
    repeats: u32,
    backend: Backend,
) -> Result<ScenarioReport, ScenarioError> {
    let mut totals: BTreeMap<&str, [f64; 5]> = BTreeMap::new();
    let (mut token, mut elapsed, mut hs, mut esp, mut retx) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut successes = 0;
    let mut failures = Vec::new();
    let mut run_success = Vec::new();
    for run in 0..repeats {
        let o = run_once(cfg, scenario, seed, run, backend)?;
        run_success.push(o.success);
        if !o.success {
            failures.push(RunFailure {
                run,
                step: o.failed_step.clone().unwrap_or_default(),
                reason: o.reason.clone().unwrap_or_default(),
            });
            continue;
        }
        successes += 1;
        let steps = o.steps();
        for label in REPORT_STEPS {
            let t = steps.get(label).cloned().unwrap_or_default();
            let e = totals.entry(label).or_default();
            e[0] += t.bytes as f64;
            e[1] += t.msgs as f64;
            e[2] += t.frags as f64;
            e[3] += t.retx as f64;
            e[4] += t.wire_bytes as f64;
        }
        token += o.token_bytes.unwrap_or(0) as f64;
        elapsed += o.elapsed_ms as f64;
        hs += HANDSHAKE_STEPS
            .iter()
            .filter_map(|s| steps.get(*s))
            .map(|t| t.msgs)
            .sum::<usize>() as f64;
        esp += o.esp_packets() as f64;
        retx += steps.values().map(|t| t.retx).sum::<usize>() as f64;
    }
    let mut rows: Vec<StepRow> = REPORT_STEPS
        .iter()
        .map(|label| {
            let t = totals.get(label).copied().unwrap_or_default();
            StepRow {
                step: (*label).to_owned(),
                bytes: mean(t[0], successes),
                msgs: mean(t[1], successes),
                frags: mean(t[2], successes),
                retx: mean(t[3], successes),
                wire_bytes: mean(t[4], successes),
            }
        })
        .collect();
    rows.push(StepRow {
        step: TOKEN_ROW.into(),
        bytes: mean(token, successes),
        msgs: 0.0,
        frags: 0.0,
        retx: 0.0,
        wire_bytes: 0.0,
    });
    Ok(ScenarioReport {
        scenario,
        runs: repeats,
        successes,
        failures,
        run_success,
        steps: rows,
        token_bytes: mean(token, successes),
        elapsed_ms: mean(elapsed, successes),
        handshake_msgs: mean(hs, successes),
        esp_packets: mean(esp, successes),
        retransmissions: mean(retx, successes),
    })
}

/// Runs several scenarios with the same seed.
pub fn run_report(
    cfg: &Config,
    scenarios: &[ScenarioName],
    seed: u64,
    repeats: u32,
    backend: Backend,
) -> Result<Report, ScenarioError> {
    let scenarios = scenarios
        .iter()
        .map(|s| run_scenario(cfg, *s, seed, repeats, backend))
        .collect::<Result<_, _>>()?;
    Ok(Report {
        seed,
        loss: cfg.network.loss,
        backend,
        repeats,
        scenarios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Format::Table),
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(ScenarioError::Unknown {
                what: "format",
                value: s.into(),
            }),
        }
    }
}

fn num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn render_json(r: &Report) -> String {
    serde_json::to_string_pretty(r).expect("report serializes") + "\n"
}

/// One row per step and scenario: `step,scenario,bytes,msgs,frags,retx,wire_bytes`.
pub fn render_csv(r: &Report) -> String {
    let mut s = String::from("step,scenario,bytes,msgs,frags,retx,wire_bytes\n");
    for sc in &r.scenarios {
        for row in &sc.steps {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                row.step,
                sc.scenario,
                num(row.bytes),
                num(row.msgs),
                num(row.frags),
                num(row.retx),
                num(row.wire_bytes)
            );
        }
    }
    s
}

/// Bytes per step side by side, then the per-scenario counters.
pub fn render_table(r: &Report) -> String {
    let mut s = format!(
        "seed {}  loss {}  backend {:?}  repeats {}\n\n",
        r.seed, r.loss, r.backend, r.repeats
    );
    s += &format!("{:<12}", "step");
    for sc in &r.scenarios {
        s += &format!("{:>10}", sc.scenario.as_str());
    }
    s.push('\n');
    let labels: Vec<&str> = REPORT_STEPS.iter().copied().chain([TOKEN_ROW]).collect();
    for label in labels {
        let present = r
            .scenarios
            .iter()
            .any(|sc| sc.step(label).is_some_and(|row| row.msgs > 0.0 || row.bytes > 0.0));
        if !present {
            continue;
        }
        s += &format!("{label:<12}");
        for sc in &r.scenarios {
            let v = sc.step(label).map_or(0.0, |row| row.bytes);
            s += &format!("{:>10}", if v == 0.0 { "-".into() } else { num(v) });
        }
        s.push('\n');
    }
    s += &format!(
        "\n{:<10}{:>6}{:>8}{:>12}{:>10}{:>6}{:>6}\n",
        "scenario", "runs", "success", "elapsed_ms", "hs_msgs", "retx", "esp"
    );
    for sc in &r.scenarios {
        s += &format!(
            "{:<10}{:>6}{:>8}{:>12}{:>10}{:>6}{:>6}\n",
            sc.scenario.as_str(),
            sc.runs,
            sc.successes,
            num(sc.elapsed_ms),
            num(sc.handshake_msgs),
            num(sc.retransmissions),
            num(sc.esp_packets)
        );
        for f in &sc.failures {
            s += &format!("  run {} failed at {}: {}\n", f.run, f.step, f.reason);
        }
    }
    s
}

pub fn render(r: &Report, format: Format) -> String {
    match format {
        Format::Table => render_table(r),
        Format::Json => render_json(r),
        Format::Csv => render_csv(r),
    }
}

/// Writes the report to `out`, or to stdout when `out` is `None`.
pub fn emit_report(r: &Report, format: Format, out: Option<&std::path::Path>) -> Result<(), ScenarioError> {
    let text = render(r, format);
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_completes() {
        let cfg = Config::default();
        for s in ScenarioName::ALL {
            let o = run_once(&cfg, s, 7, 0, Backend::Sim).unwrap();
            assert!(o.success, "{s}: {:?} {:?}", o.failed_step, o.reason);
            assert_eq!(o.esp_packets() == 0, s == ScenarioName::Base, "{s}");
        }
    }

    #[test]
    fn names_round_trip() {
        for s in ScenarioName::ALL {
            assert_eq!(s.as_str().parse::<ScenarioName>().unwrap(), s);
        }
        assert!("tls".parse::<ScenarioName>().is_err());
    }
}
