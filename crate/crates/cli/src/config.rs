//! Config file model. Values resolve as flag > file > default; API keys and
//! endpoint overrides come from the environment only.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use nl2sql::gateway::{
    AgentRole, Backend, Gateway, ModelRoute, PriceTable, RemoteBackend, ReplayBackend, RouteTarget, ScriptedBackend,
};
use nl2sql::pipeline::PipelineConfig;

pub const DEFAULT_BACKEND: &str = "default";
pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub db_root: Option<PathBuf>,
    pub tables: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    /// Replay cache directory; every backend is wrapped when set.
    pub cache_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub in_flight: Option<usize>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    /// Role name (or `default`) to backend and model.
    #[serde(default)]
    pub routes: BTreeMap<String, RouteTarget>,
    pub prices: Option<PriceTable>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Remote {
        /// Used when `NL2SQL_<ID>_BASE_URL` is unset.
        base_url: Option<String>,
        timeout_secs: Option<f64>,
        max_attempts: Option<u32>,
    },
    Scripted {
        fixture: PathBuf,
    },
    /// Answers from the replay cache only; a miss is an error.
    Replay,
}

/// Scripted backend fixture file (JSON).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFixture {
    /// Per-role ordered replies.
    #[serde(default)]
    pub roles: BTreeMap<String, Vec<String>>,
    /// Replies keyed by request digest.
    #[serde(default)]
    pub keys: BTreeMap<String, String>,
    /// Repeat a role's last reply once its script runs out.
    #[serde(default)]
    pub lenient: bool,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.db_root, &mut cfg.tables, &mut cfg.templates_dir, &mut cfg.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for b in cfg.backends.values_mut() {
            if let BackendConfig::Scripted { fixture } = b {
                if fixture.is_relative() {
                    *fixture = base.join(&*fixture);
                }
            }
        }
        Ok(cfg)
    }

    /// Route table with `default` filling unmapped roles; `model_override`
    /// replaces every model.
    pub fn model_route(&self, model_override: Option<&str>) -> Result<ModelRoute> {
        for key in self.routes.keys() {
            if key != "default" && AgentRole::parse(key).is_none() {
                bail!("unknown role `{key}` in [routes]");
            }
        }
        let fallback = self.routes.get("default").cloned().unwrap_or_else(|| RouteTarget {
            backend: self.backends.keys().next().cloned().unwrap_or_else(|| DEFAULT_BACKEND.into()),
            model: DEFAULT_MODEL.into(),
        });
        let mut routes = BTreeMap::new();
        for role in AgentRole::ALL {
            let mut t = self.routes.get(role.as_str()).cloned().unwrap_or_else(|| fallback.clone());
            if let Some(m) = model_override {
                t.model = m.to_string();
            }
            routes.insert(role, t);
        }
        Ok(ModelRoute::new(routes)?)
    }

    pub fn gateway(&self, model_override: Option<&str>, cache_dir: Option<&Path>) -> Result<Gateway> {
        let route = self.model_route(model_override)?;
        let mut specs = self.backends.clone();
        if specs.is_empty() {
            specs.insert(
                DEFAULT_BACKEND.into(),
                BackendConfig::Remote { base_url: None, timeout_secs: None, max_attempts: None },
            );
        }
        let mut backends: HashMap<String, Arc<dyn Backend>> = HashMap::new();
        for (id, spec) in &specs {
            let inner: Option<Arc<dyn Backend>> = match spec {
                BackendConfig::Remote { base_url, timeout_secs, max_attempts } => {
                    let env_id: String = id
                        .chars()
                        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
                        .collect();
                    let url = std::env::var(format!("NL2SQL_{env_id}_BASE_URL"))
                        .ok()
                        .or_else(|| base_url.clone())
                        .unwrap_or_else(|| "https://api.openai.com".into());
                    let key = std::env::var(format!("NL2SQL_{env_id}_API_KEY")).ok();
                    let timeout = Duration::try_from_secs_f64(timeout_secs.unwrap_or(120.0))
                        .with_context(|| format!("backend `{id}`: bad timeout_secs"))?;
                    let mut remote = RemoteBackend::new(url, key, timeout);
                    if let Some(n) = max_attempts {
                        let retry = nl2sql::gateway::RetryPolicy { max_attempts: (*n).max(1), ..Default::default() };
                        remote = remote.with_retry(retry);
                    }
                    Some(Arc::new(remote))
                }
                BackendConfig::Scripted { fixture } => Some(Arc::new(scripted_from_fixture(fixture)?)),
                BackendConfig::Replay => None,
            };
            let backend: Arc<dyn Backend> = match (cache_dir, inner) {
                (Some(dir), inner) => Arc::new(ReplayBackend::new(dir, inner)?),
                (None, Some(b)) => b,
                (None, None) => bail!("backend `{id}` is replay-only but no cache_dir is configured"),
            };
            backends.insert(id.clone(), backend);
        }
        let mut gw = Gateway::new(route, backends)?;
        if let Some(n) = self.in_flight {
            gw = gw.with_in_flight_limit(n.max(1));
        }
        Ok(gw)
    }
}

pub fn scripted_from_fixture(path: &Path) -> Result<ScriptedBackend> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read script fixture {}", path.display()))?;
    let fx: ScriptFixture =
        serde_json::from_str(&text).with_context(|| format!("invalid script fixture {}", path.display()))?;
    let mut b = ScriptedBackend::new();
    for (role, replies) in fx.roles {
        let role = AgentRole::parse(&role).with_context(|| format!("unknown role `{role}` in {}", path.display()))?;
        b = b.with_script(role, replies);
    }
    for (k, v) in fx.keys {
        b = b.with_key(k, v);
    }
    if fx.lenient {
        b = b.lenient();
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_route_fills_every_role() {
        let cfg: FileConfig = toml::from_str(
            r#"
[backends.local]
kind = "replay"

[routes]
default = { backend = "local", model = "m1" }
sql = { backend = "local", model = "m2" }
"#,
        )
        .unwrap();
        let route = cfg.model_route(None).unwrap();
        assert_eq!(route.target(AgentRole::Sql).model, "m2");
        assert_eq!(route.target(AgentRole::SchemaLinking).model, "m1");
        let forced = cfg.model_route(Some("m3")).unwrap();
        assert!(forced.iter().all(|(_, t)| t.model == "m3"));
    }

    #[test]
    fn unknown_role_rejected() {
        let cfg: FileConfig = toml::from_str("[routes]\nplanner = { backend = \"x\", model = \"y\" }\n").unwrap();
        assert!(cfg.model_route(None).is_err());
    }

    #[test]
    fn api_keys_are_not_config_fields() {
        let err = toml::from_str::<FileConfig>("[backends.a]\nkind = \"remote\"\napi_key = \"sk-x\"\n");
        assert!(err.is_err());
    }

    #[test]
    fn pipeline_section_overrides_defaults() {
        let cfg: FileConfig =
            toml::from_str("[pipeline]\nmax_correction_attempts = 5\ntimeout = 2.5\nschema_format = \"listing\"\n")
                .unwrap();
        assert_eq!(cfg.pipeline.max_correction_attempts, 5);
        assert_eq!(cfg.pipeline.timeout, Duration::from_millis(2500));
        assert!(!cfg.pipeline.skip_correction);
    }
}
