//! Python bindings: scenario reports, the replay window, the AS SPI pool,
//! the IKEv2 PRFs, the ESP AEAD and token opening.

use ace_ipsec::actors::authz::{RestoreOutcome, SpiPool as CoreSpiPool};
use ace_ipsec::config::Config;
use ace_ipsec::crypto::{self, AeadKey};
use ace_ipsec::ipsec::ReplayWindow as CoreWindow;
use ace_ipsec::scenario::{self, Backend, Format, ScenarioName};
use ace_ipsec::token::{self, KeyType};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

pub fn parse_scenario(s: &str) -> Result<ScenarioName, String> {
    ScenarioName::ALL
        .into_iter()
        .find(|n| n.as_str() == s)
        .ok_or_else(|| format!("unknown scenario {s:?}"))
}

fn fixed<const N: usize>(b: &[u8], what: &str) -> PyResult<[u8; N]> {
    b.try_into()
        .map_err(|_| value_err(format!("{what} must be {N} bytes, got {}", b.len())))
}

/// Runs scenarios and returns the report rendered as `json`, `csv` or `table`.
#[pyfunction]
#[pyo3(signature = (scenarios=None, seed=1, repeats=1, loss=None, config_toml=None, backend="sim", format="json"))]
fn run_report(
    py: Python<'_>,
    scenarios: Option<Vec<String>>,
    seed: u64,
    repeats: u32,
    loss: Option<f64>,
    config_toml: Option<&str>,
    backend: &str,
    format: &str,
) -> PyResult<String> {
    let mut cfg = match config_toml {
        Some(s) => Config::from_toml(s).map_err(value_err)?,
        None => Config::default(),
    };
    if let Some(l) = loss {
        cfg.network.loss = l;
        cfg.validate().map_err(value_err)?;
    }
    let names = match scenarios {
        Some(v) => v.iter().map(|s| parse_scenario(s)).collect::<Result<Vec<_>, _>>().map_err(value_err)?,
        None => ScenarioName::ALL.to_vec(),
    };
    let backend = match backend {
        "sim" => Backend::Sim,
        "udp" => Backend::Udp,
        other => return Err(value_err(format!("unknown backend {other:?}"))),
    };
    let format: Format = format.parse().map_err(value_err)?;
    let report = py
        .detach(|| scenario::run_report(&cfg, &names, seed, repeats, backend))
        .map_err(value_err)?;
    Ok(scenario::render(&report, format))
}

/// HMAC-SHA-256.
#[pyfunction]
fn prf<'py>(py: Python<'py>, key: &[u8], data: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &crypto::prf(key, data))
}

/// The IKEv2 key expansion function, truncated to `n` bytes.
#[pyfunction]
fn prf_plus<'py>(py: Python<'py>, key: &[u8], seed: &[u8], n: usize) -> PyResult<Bound<'py, PyBytes>> {
    let out = crypto::prf_plus(key, seed, n).map_err(value_err)?;
    Ok(PyBytes::new(py, &out))
}

/// AES-CCM with an 8-byte tag; 16-byte key, 4-byte salt, 8-byte IV.
#[pyfunction]
fn aead_seal<'py>(
    py: Python<'py>,
    key: &[u8],
    salt: &[u8],
    iv: &[u8],
    aad: &[u8],
    plaintext: &[u8],
) -> PyResult<Bound<'py, PyBytes>> {
    let k = AeadKey::new(fixed(key, "key")?, fixed(salt, "salt")?);
    Ok(PyBytes::new(py, &crypto::aead_seal(&k, &fixed(iv, "iv")?, aad, plaintext)))
}

/// Inverse of `aead_seal`; raises `ValueError` when the tag does not verify.
#[pyfunction]
fn aead_open<'py>(
    py: Python<'py>,
    key: &[u8],
    salt: &[u8],
    iv: &[u8],
    aad: &[u8],
    ciphertext: &[u8],
) -> PyResult<Bound<'py, PyBytes>> {
    let k = AeadKey::new(fixed(key, "key")?, fixed(salt, "salt")?);
    let pt = crypto::aead_open(&k, &fixed(iv, "iv")?, aad, ciphertext).map_err(value_err)?;
    Ok(PyBytes::new(py, &pt))
}

/// Opens a sealed access token and returns its claims as a dict.
#[pyfunction]
fn open_token<'py>(py: Python<'py>, sealed: &[u8], key: &[u8], salt: &[u8], now: u64) -> PyResult<Bound<'py, PyDict>> {
    let k = AeadKey::new(fixed(key, "key")?, fixed(salt, "salt")?);
    let t = token::open_token(sealed, &k, now).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("iss", &t.iss)?;
    d.set_item("aud", &t.aud)?;
    d.set_item("client_id", &t.client_id)?;
    d.set_item("scope", &t.scope)?;
    d.set_item("exp", t.exp)?;
    d.set_item("cti", PyBytes::new(py, &t.cti))?;
    d.set_item("profile", &t.profile)?;
    d.set_item("kmp", &t.kmp)?;
    let method = token::validate_method_signaling(&t).ok().map(|m| format!("{m:?}"));
    d.set_item("method", method)?;
    if let Some(i) = &t.ipsec {
        d.set_item("spi_sa_c", i.spi_sa_c)?;
        d.set_item("spi_sa_rs", i.spi_sa_rs)?;
        d.set_item("seed", i.seed.map(|s| PyBytes::new(py, &s)))?;
        d.set_item("lifetime_s", i.lifetime_s)?;
    }
    if let Some(c) = &t.cnf {
        let kty = match c.kty {
            KeyType::Symmetric => "Symmetric",
            KeyType::Ec => "EC",
        };
        d.set_item("cnf_kty", kty)?;
        d.set_item("cnf_kid", PyBytes::new(py, &c.kid))?;
        d.set_item("cnf_chain_len", c.chain.len())?;
    }
    Ok(d)
}

/// Sliding anti-replay window over 64-bit sequence numbers.
#[pyclass]
struct ReplayWindow(CoreWindow);

#[pymethods]
impl ReplayWindow {
    #[new]
    #[pyo3(signature = (size=64))]
    fn new(size: u32) -> PyResult<Self> {
        if size == 0 || size > 64 {
            return Err(value_err("window size must be 1..=64"));
        }
        Ok(Self(CoreWindow::new(size)))
    }

    /// True if `seq` would be accepted; the window is unchanged.
    fn check(&self, seq: u64) -> bool {
        self.0.check(seq).is_ok()
    }

    /// Accepts `seq` if fresh and records it.
    fn accept(&mut self, seq: u64) -> bool {
        self.0.accept(seq).is_ok()
    }

    #[getter]
    fn highest(&self) -> u64 {
        self.0.highest()
    }

    #[getter]
    fn size(&self) -> u32 {
        self.0.size()
    }
}

/// The AS's pool of reserved SA-C SPIs, drawn from with a seeded RNG.
#[pyclass]
struct SpiPool {
    pool: CoreSpiPool,
    rng: ChaCha20Rng,
}

#[pymethods]
impl SpiPool {
    #[new]
    #[pyo3(signature = (start, size, seed=0))]
    fn new(start: u32, size: u32, seed: u64) -> Self {
        Self { pool: CoreSpiPool::range(start, size), rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Takes a random free SPI; raises `ValueError` when the pool is empty.
    fn draw(&mut self) -> PyResult<u32> {
        self.pool.draw(&mut self.rng).map_err(value_err)
    }

    /// Returns `spi` to the pool: "restored", "already-available" or "not-from-pool".
    fn restore(&mut self, spi: u32) -> &'static str {
        match self.pool.restore(spi) {
            RestoreOutcome::Restored => "restored",
            RestoreOutcome::AlreadyAvailable => "already-available",
            RestoreOutcome::NotFromPool => "not-from-pool",
        }
    }

    fn __contains__(&self, spi: u32) -> bool {
        self.pool.contains(spi)
    }

    fn is_available(&self, spi: u32) -> bool {
        self.pool.is_available(spi)
    }

    fn __len__(&self) -> usize {
        self.pool.available()
    }
}

#[pymodule]
#[pyo3(name = "ace_ipsec")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_report, m)?)?;
    m.add_function(wrap_pyfunction!(prf, m)?)?;
    m.add_function(wrap_pyfunction!(prf_plus, m)?)?;
    m.add_function(wrap_pyfunction!(aead_seal, m)?)?;
    m.add_function(wrap_pyfunction!(aead_open, m)?)?;
    m.add_function(wrap_pyfunction!(open_token, m)?)?;
    m.add_class::<ReplayWindow>()?;
    m.add_class::<SpiPool>()?;
    m.add("SCENARIOS", ScenarioName::ALL.map(|s| s.as_str()).to_vec())?;
    Ok(())
}
