/// Worker count and reduction mode, passed by value to every parallel stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecSettings {
    /// Worker threads; 0 means one per available core.
    pub threads: usize,
    /// Fixed batch assignment and merge tree, bit-identical for any `threads`.
    pub deterministic: bool,
}

impl Default for ExecSettings {
    fn default() -> Self {
        Self {
            threads: 1,
            deterministic: true,
        }
    }
}

impl ExecSettings {
    pub fn sequential() -> Self {
        Self::default()
    }

    pub fn with_threads(self, threads: usize) -> Self {
        Self { threads, ..self }
    }

    pub fn effective_threads(&self) -> usize {
        if self.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.threads
        }
    }

    /// Runs `op` inside a pool of `effective_threads()` workers.
    pub fn install<R: Send>(&self, op: impl FnOnce() -> R + Send) -> R {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.effective_threads())
            .build()
            .expect("failed to start worker pool");
        pool.install(op)
    }
}
