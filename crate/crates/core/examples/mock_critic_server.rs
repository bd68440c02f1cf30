//! Serve a toy critic over HTTP and drive score distillation through the
//! client, as a remote model server would be used.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeopt::augment::AugmentConfig;
use strokeopt::critic::{Critic, ToyCritic};
use strokeopt::critic_client::mock::MockServer;
use strokeopt::critic_client::HttpCritic;
use strokeopt::gradcheck::random_sketch;
use strokeopt::guidance::{asds_step, AsdsConfig};
use strokeopt::render;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = render(&random_sketch(&mut ChaCha8Rng::seed_from_u64(1), 4, 32, 32, 2.0))?;
    let server = MockServer::start(Arc::new(ToyCritic::with_resolution(target, 32)?))?;
    println!("mock critic at {}", server.url());

    let client = HttpCritic::connect(server.url())?;
    println!("{}", serde_json::to_string_pretty(&client.info()?)?);

    let sketch = random_sketch(&mut ChaCha8Rng::seed_from_u64(2), 4, 32, 32, 2.0);
    let cfg = AsdsConfig {
        augment: AugmentConfig::identity(),
        ..AsdsConfig::default()
    };
    let (grad, diag) = asds_step(&sketch, &client, "x", &cfg, &mut ChaCha8Rng::seed_from_u64(3))?;
    println!("t = {:?}, |grad| = {:.4}", diag.timesteps, grad.l2_norm());

    server.fail_next(2);
    let again = client.attention("a cat", 0)?;
    println!("attention survived 2 transient failures: {} tokens, {} requests served", again.token_labels.len(), server.request_count());
    Ok(())
}
