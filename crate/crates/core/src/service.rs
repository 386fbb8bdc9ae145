//! Real-time local mode. The same explorer, join, learner and store as the
//! simulated loop, driven by the wall clock from one background thread.
//! Decisions and rewards come in from any number of caller threads.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::exploration::{Explorer, Observation};
use crate::gateway::{DecisionRequest, DecisionResponse, Gateway, GatewayError, RewardAck, RewardRequest};
use crate::join::{JoinMetrics, JoinService};
use crate::learner::{LearnError, Learner, MetricsSnapshot};
use crate::policy::FixedAction;
use crate::sim::{LoopConfig, SimError};
use crate::store::Store;
use crate::types::EventTime;

/// Milliseconds since the Unix epoch.
pub fn wall_clock() -> EventTime {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    EventTime(d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    /// Exploration, join, learner and cadence settings. `seed`,
    /// `decision_interval_ms` and `report_window` are not used here.
    pub loop_cfg: LoopConfig,
    /// How often the background thread wakes up.
    pub tick_ms: u64,
    /// The join watermark trails the wall clock by this much, so rewards
    /// sent just before their deadline still make it.
    pub lateness_ms: u64,
}

impl ServiceConfig {
    pub fn new(loop_cfg: LoopConfig) -> Self {
        ServiceConfig {
            loop_cfg,
            tick_ms: 10,
            lateness_ms: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ServiceStatus {
    /// Model the explorer is deciding with.
    pub deployed_model_id: u64,
    pub checkpoints: u64,
    pub deploys: u64,
    /// Deploy time minus decision time of the newest interaction in the
    /// deployed model, one entry per deploy.
    pub learning_latency_ms: Vec<u64>,
    pub join: JoinMetrics,
    pub learner: Option<MetricsSnapshot>,
    pub error: Option<String>,
}

impl ServiceStatus {
    pub fn learning_latency_mean_ms(&self) -> Option<f64> {
        let l = &self.learning_latency_ms;
        (!l.is_empty()).then(|| l.iter().sum::<u64>() as f64 / l.len() as f64)
    }
}

struct Shared {
    stop: AtomicBool,
    status: Mutex<ServiceStatus>,
}

pub struct LocalService {
    gateway: Arc<Gateway>,
    store: Arc<dyn Store>,
    shared: Arc<Shared>,
    worker: Option<JoinHandle<Result<(), SimError>>>,
}

struct Worker {
    cfg: ServiceConfig,
    rx: mpsc::Receiver<Observation>,
    explorer: Arc<Explorer>,
    store: Arc<dyn Store>,
    join: JoinService,
    learner: Learner,
    shared: Arc<Shared>,
    newest_trained: u64,
    /// Model id → decision time of the newest interaction it contains.
    newest_in_model: BTreeMap<u64, u64>,
    last_checkpoint: (u64, u64),
}

impl Worker {
    fn pump(&mut self, watermark: EventTime) -> Result<(), SimError> {
        while let Ok(obs) = self.rx.try_recv() {
            self.join.ingest(obs);
        }
        for ji in self.join.advance(watermark)? {
            match self.learner.train_step(&ji) {
                Ok(_) => self.newest_trained = self.newest_trained.max(ji.decision_time.0),
                Err(LearnError::InvalidData { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, now: u64) -> Result<(), SimError> {
        let id = self.learner.checkpoint()?;
        self.newest_in_model.insert(id, self.newest_trained);
        self.last_checkpoint = (now, self.learner.step());
        self.shared.status.lock().expect("status lock poisoned").checkpoints += 1;
        Ok(())
    }

    fn tick(&mut self, now: u64) -> Result<(), SimError> {
        self.pump(EventTime(now.saturating_sub(self.cfg.lateness_ms)))?;
        let (at, step) = self.last_checkpoint;
        if now >= at + self.cfg.loop_cfg.checkpoint_interval_ms && self.learner.step() > step {
            self.checkpoint(now)?;
        }
        let deployed = self.explorer.maybe_refresh(EventTime(now), self.store.as_ref());
        let mut st = self.shared.status.lock().expect("status lock poisoned");
        if let Some(id) = deployed {
            st.deploys += 1;
            if let Some(newest) = self.newest_in_model.get(&id) {
                st.learning_latency_ms.push(now.saturating_sub(*newest));
            }
            // Older entries can no longer be deployed.
            self.newest_in_model = self.newest_in_model.split_off(&id);
        }
        st.deployed_model_id = self.explorer.current_model_id();
        st.join = self.join.metrics();
        st.learner = Some(self.learner.metrics());
        Ok(())
    }

    fn run(mut self) -> Result<(), SimError> {
        let tick = Duration::from_millis(self.cfg.tick_ms.max(1));
        while !self.shared.stop.load(Ordering::Acquire) {
            self.tick(wall_clock().0)?;
            thread::sleep(tick);
        }
        // Close every window opened before the stop; rewards that have not
        // arrived yet count as missing.
        let now = wall_clock().0;
        self.pump(EventTime(now + self.cfg.loop_cfg.experimental_unit_ms))?;
        if self.learner.step() > self.last_checkpoint.1 {
            self.checkpoint(now)?;
        }
        let pending = self.learner.flush();
        if pending > 0 {
            log::warn!("{pending} checkpoints still unwritten at shutdown");
        }
        let mut st = self.shared.status.lock().expect("status lock poisoned");
        st.join = self.join.metrics();
        st.learner = Some(self.learner.metrics());
        Ok(())
    }
}

impl LocalService {
    /// Starts the background thread. A store that already holds models is
    /// resumed: the learner continues from the latest checkpoint and
    /// retrains the logged interactions after its cursor.
    pub fn start(cfg: ServiceConfig, store: Arc<dyn Store>) -> Result<Self, SimError> {
        cfg.loop_cfg.validate()?;
        let (tx, rx) = mpsc::channel();
        let explorer = Arc::new(Explorer::new(cfg.loop_cfg.exploration())?.with_sink(tx));
        explorer.refresh_model(store.as_ref())?;

        let mut learner = Learner::resume(cfg.loop_cfg.effective_learner(), Arc::clone(&store))?;
        let logged = store.interaction_count()?;
        if learner.log_offset() < logged {
            log::info!("retraining {} logged interactions", logged - learner.log_offset());
            for ji in store.read_interactions(learner.log_offset()..logged)? {
                match learner.train_step(&ji) {
                    Ok(_) | Err(LearnError::InvalidData { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        learner.add_candidate("baseline", Box::new(FixedAction(cfg.loop_cfg.baseline_action)));

        let started = wall_clock().0;
        let prefix = format!("{}-{started}", cfg.loop_cfg.app_id);
        let gateway = Arc::new(Gateway::with_id_prefix(Arc::clone(&explorer), prefix));
        let shared = Arc::new(Shared {
            stop: AtomicBool::new(false),
            status: Mutex::new(ServiceStatus {
                deployed_model_id: explorer.current_model_id(),
                ..ServiceStatus::default()
            }),
        });
        let step = learner.step();
        let worker = Worker {
            join: JoinService::new(cfg.loop_cfg.join()).with_store(Arc::clone(&store)),
            cfg,
            rx,
            explorer,
            store: Arc::clone(&store),
            learner,
            shared: Arc::clone(&shared),
            newest_trained: 0,
            newest_in_model: BTreeMap::new(),
            last_checkpoint: (started, step),
        };
        let handle = thread::Builder::new()
            .name("banditloop-learner".into())
            .spawn(move || {
                let shared = Arc::clone(&worker.shared);
                let result = worker.run();
                if let Err(e) = &result {
                    log::error!("learner thread stopped: {e}");
                    shared.status.lock().expect("status lock poisoned").error = Some(e.to_string());
                }
                result
            })
            .map_err(|e| SimError::Config(format!("cannot spawn learner thread: {e}")))?;
        Ok(LocalService {
            gateway,
            store,
            shared,
            worker: Some(handle),
        })
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn store(&self) -> &Arc<dyn Store> {
        &self.store
    }

    pub fn decide(&self, req: &DecisionRequest) -> Result<DecisionResponse, GatewayError> {
        Ok(self.gateway.handle_decision(req, wall_clock())?.0)
    }

    pub fn reward(&self, req: &RewardRequest) -> Result<RewardAck, GatewayError> {
        self.gateway.handle_reward(req, wall_clock())
    }

    pub fn status(&self) -> ServiceStatus {
        self.shared.status.lock().expect("status lock poisoned").clone()
    }

    /// Stops the thread, trains what is left, writes a final checkpoint and
    /// returns the last status.
    pub fn shutdown(mut self) -> Result<ServiceStatus, SimError> {
        self.stop()?;
        Ok(self.status())
    }

    fn stop(&mut self) -> Result<(), SimError> {
        self.shared.stop.store(true, Ordering::Release);
        match self.worker.take() {
            Some(h) => h
                .join()
                .map_err(|_| SimError::Config("learner thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for LocalService {
    fn drop(&mut self) {
        if let Err(e) = self.stop() {
            log::error!("shutdown: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ActionSpec;
    use crate::store::MemStore;
    use crate::types::FeatureSet;
    use std::time::Instant;

    fn fast_cfg() -> ServiceConfig {
        let mut lc = LoopConfig::standard(0.2, 0.1);
        lc.experimental_unit_ms = 100;
        lc.checkpoint_interval_ms = 50;
        lc.refresh_interval_ms = 20;
        ServiceConfig {
            loop_cfg: lc,
            tick_ms: 5,
            lateness_ms: 10,
        }
    }

    fn request(app: &str) -> DecisionRequest {
        DecisionRequest {
            app_id: app.into(),
            event_id: None,
            shared: FeatureSet::new().with("user", "u0", 1.0),
            actions: ["a", "b", "c"]
                .iter()
                .map(|id| ActionSpec {
                    id: id.to_string(),
                    features: FeatureSet::new().with("item", id, 1.0),
                })
                .collect(),
        }
    }

    #[test]
    fn rewards_reach_a_deployed_model() {
        let store: Arc<dyn Store> = Arc::new(MemStore::new());
        let cfg = fast_cfg();
        let svc = LocalService::start(cfg.clone(), Arc::clone(&store)).unwrap();
        let req = request(&cfg.loop_cfg.app_id);
        let deadline = Instant::now() + Duration::from_secs(10);
        while svc.status().learning_latency_ms.is_empty() && Instant::now() < deadline {
            let resp = svc.decide(&req).unwrap();
            let reward = if resp.action == "b" { 1.0 } else { 0.0 };
            svc.reward(&RewardRequest {
                event_id: resp.event_id,
                reward,
            })
            .unwrap();
            thread::sleep(Duration::from_millis(2));
        }
        let status = svc.shutdown().unwrap();
        assert!(status.error.is_none());
        assert!(status.deploys >= 1);
        let lat = status.learning_latency_ms[0];
        // At least one experimental unit, and well under the test deadline.
        assert!((100..5_000).contains(&lat), "latency {lat}");
        let learner = status.learner.unwrap();
        assert_eq!(learner.step, status.join.emitted);
        assert_eq!(store.interaction_count().unwrap(), status.join.emitted);
    }

    #[test]
    fn restart_resumes_from_the_store() {
        let store: Arc<dyn Store> = Arc::new(MemStore::new());
        let cfg = fast_cfg();
        let svc = LocalService::start(cfg.clone(), Arc::clone(&store)).unwrap();
        for _ in 0..20 {
            svc.decide(&request(&cfg.loop_cfg.app_id)).unwrap();
        }
        let first = svc.shutdown().unwrap().learner.unwrap();
        assert_eq!(first.step, 20);

        let svc = LocalService::start(cfg.clone(), Arc::clone(&store)).unwrap();
        assert_eq!(svc.status().deployed_model_id, first.model_id);
        svc.decide(&request(&cfg.loop_cfg.app_id)).unwrap();
        let second = svc.shutdown().unwrap().learner.unwrap();
        assert_eq!(second.step, 21);
        assert_eq!(store.interaction_count().unwrap(), 21);
    }

    #[test]
    fn unknown_app_is_rejected() {
        let svc = LocalService::start(fast_cfg(), Arc::new(MemStore::new())).unwrap();
        assert_eq!(svc.decide(&request("other")).unwrap_err().status(), 404);
    }
}
