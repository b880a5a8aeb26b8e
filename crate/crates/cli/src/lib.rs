//! Runners behind the `sara` binary: estimator verification, engine
//! benchmark, up-training and the navigation demo.

pub mod bench;
pub mod config;
pub mod demo;
pub mod output;
pub mod train;
pub mod verify;

/// Engine-internal parallelism: `SARA_ATTN_THREADS` wins over the config
/// flag; a value above 1 turns it on.
pub fn engine_parallelism(config_flag: bool) -> anyhow::Result<(bool, Option<usize>)> {
    match std::env::var("SARA_ATTN_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("SARA_ATTN_THREADS must be a positive integer, got {raw:?}"))?;
            if n == 0 {
                anyhow::bail!("SARA_ATTN_THREADS must be a positive integer, got 0");
            }
            Ok((n > 1, Some(n)))
        }
        Err(_) => Ok((config_flag, None)),
    }
}
