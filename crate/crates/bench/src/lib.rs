//! Fixtures shared by the benchmarks.

use layerfed::data::{partition_iid, synth_dataset, Dataset, Partition, SynthSpec};
use layerfed::encoder::{EncoderConfig, LayeredEncoder};
use layerfed::federation::FedConfig;
use layerfed::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Desk-profile encoder, a small synthetic dataset and its partition.
pub struct DeskFixture {
    pub encoder: LayeredEncoder,
    pub data: Dataset,
    pub partition: Partition,
    pub fed: FedConfig,
}

impl DeskFixture {
    pub fn new(batch_size: usize) -> Self {
        let fed = FedConfig {
            num_clients: 4,
            clients_per_round: 1,
            rounds_per_layer: 1,
            batch_size,
            local_steps: 1,
            client_lr: 0.05,
            server_lr: 1.0,
            budget: 0,
            drop_rate: 0.0,
            seed: 0,
            temperature: 0.5,
        };
        let data = synth_dataset(&SynthSpec::new(4, 4 * batch_size, 32, 32, 0)).expect("valid synth spec");
        let partition = partition_iid(data.len(), fed.num_clients, 0).expect("enough examples");
        DeskFixture {
            encoder: LayeredEncoder::init(EncoderConfig::desk(), 0).expect("desk config"),
            data,
            partition,
            fed,
        }
    }
}
