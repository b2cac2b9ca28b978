use std::sync::Arc;

use crate::audit::AuditLog;
use crate::entropy::EntropySource;
use crate::identity::Authorizer;
use crate::instrument::LiveTracker;
use crate::time::Clock;

/// Shared services every component is wired to.
#[derive(Clone)]
pub struct Context {
    pub clock: Arc<dyn Clock>,
    pub entropy: Arc<dyn EntropySource>,
    pub audit: Arc<AuditLog>,
    pub authz: Authorizer,
    pub tracker: LiveTracker,
}

impl Context {
    pub fn new(clock: Arc<dyn Clock>, entropy: Arc<dyn EntropySource>, audit: Arc<AuditLog>) -> Self {
        Self {
            clock,
            entropy,
            authz: Authorizer::new(audit.clone()),
            audit,
            tracker: LiveTracker::new(),
        }
    }

    /// In-memory audit log, OS entropy, the given clock.
    pub fn ephemeral(clock: Arc<dyn Clock>) -> Self {
        let audit = Arc::new(AuditLog::in_memory(clock.clone()));
        Self::new(clock, Arc::new(crate::entropy::OsEntropy), audit)
    }
}
