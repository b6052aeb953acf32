use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{COMPACT_DIM, SEMANTIC_DIM};
use crate::nnkit::{Activation, Checkpoint, LayerStack, NnError, Tensor};

const KIND: &str = "autoencoder";

/// 512 → 256 → 128 → 3 (tanh) encoder with a mirrored linear-output decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: LayerStack,
    pub decoder: LayerStack,
}

impl Autoencoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder =
            LayerStack::mlp(&[SEMANTIC_DIM, 256, 128, COMPACT_DIM], Activation::Relu, Activation::Tanh, &mut rng);
        let decoder =
            LayerStack::mlp(&[COMPACT_DIM, 128, 256, SEMANTIC_DIM], Activation::Relu, Activation::Identity, &mut rng);
        Self { encoder, decoder }
    }

    pub fn arch_hash(&self) -> u32 {
        crc32fast::hash(format!("{}|{}", self.encoder.describe(), self.decoder.describe()).as_bytes())
    }

    pub fn encode(&self, x: &[f64]) -> [f64; COMPACT_DIM] {
        let t = Tensor::from_vec(&[1, x.len()], x.to_vec()).expect("row vector");
        let y = self.encoder.infer(&t).expect("512-d input");
        [y.data()[0], y.data()[1], y.data()[2]]
    }

    pub fn decode(&self, l: &[f64; COMPACT_DIM]) -> Vec<f64> {
        let t = Tensor::from_vec(&[1, COMPACT_DIM], l.to_vec()).expect("row vector");
        self.decoder.infer(&t).expect("3-d input").into_data()
    }

    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.decoder.infer(&self.encoder.infer(batch)?)
    }

    /// Loss and gradients in [`Self::params`] order.
    pub fn loss_and_grads(&self, batch: &Tensor) -> Result<(f64, Vec<Tensor>), NnError> {
        let n = batch.shape()[0] as f64;
        let (code, etape) = self.encoder.forward(batch)?;
        let (recon, dtape) = self.decoder.forward(&code)?;
        let mut loss = 0.0;
        let mut d = recon.zeros_like();
        for ((g, r), x) in d.data_mut().iter_mut().zip(recon.data()).zip(batch.data()) {
            let e = r - x;
            loss += e * e;
            *g = 2.0 * e / n;
        }
        let (dcode, mut grads) = self.decoder.backward(&dtape, &d)?;
        let (_, egrads) = self.encoder.backward(&etape, &dcode)?;
        let mut all = egrads;
        all.append(&mut grads);
        Ok((loss / n, all))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.meta.insert("kind".into(), KIND.into());
        c.meta.insert("arch".into(), format!("{:08x}", self.arch_hash()));
        c.meta.insert("compact_dim".into(), COMPACT_DIM.to_string());
        for (name, t) in self.encoder.named_params("enc").into_iter().chain(self.decoder.named_params("dec")) {
            c.insert(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, NnError> {
        let mut ae = Self::new(0);
        if c.meta.get("kind").map(String::as_str) != Some(KIND) {
            return Err(NnError::Checkpoint("not an autoencoder checkpoint".into()));
        }
        let want = format!("{:08x}", ae.arch_hash());
        if c.meta.get("arch") != Some(&want) {
            return Err(NnError::Checkpoint(format!("architecture hash {:?}, expected {want}", c.meta.get("arch"))));
        }
        let names: Vec<String> =
            ae.encoder.named_params("enc").into_iter().chain(ae.decoder.named_params("dec")).map(|(n, _)| n).collect();
        c.restore(names.into_iter().zip(ae.params_mut()).collect())?;
        Ok(ae)
    }
}

/// Mean over the batch of `‖D(G(x)) − x‖²`.
pub fn ae_loss(ae: &Autoencoder, batch: &Tensor) -> Result<f64, NnError> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(NnError::Shape("empty batch".into()));
    }
    let recon = ae.reconstruct(batch)?;
    let n = batch.shape()[0];
    let dim = batch.len() / n;
    let mut total = 0.0;
    for (r, x) in recon.data().chunks(dim).zip(batch.data().chunks(dim)) {
        total += r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{Adam, Layer};
    use rand::Rng;

    fn random_batch(seed: u64, n: usize) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, SEMANTIC_DIM], (0..n * SEMANTIC_DIM).map(|_| r.gen_range(-0.1..0.1)).collect()).unwrap()
    }

    #[test]
    fn encode_is_bounded_and_deterministic() {
        let ae = Autoencoder::new(1);
        let x = random_batch(2, 1);
        let a = ae.encode(x.data());
        assert_eq!(a, ae.encode(x.data()));
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(ae.decode(&a).len(), SEMANTIC_DIM);
    }

    #[test]
    fn loss_matches_double_loop() {
        let ae = Autoencoder::new(3);
        let batch = random_batch(4, 5);
        let mut expect = 0.0;
        for i in 0..5 {
            let x = &batch.data()[i * SEMANTIC_DIM..(i + 1) * SEMANTIC_DIM];
            let r = ae.decode(&ae.encode(x));
            for k in 0..SEMANTIC_DIM {
                expect += (r[k] - x[k]).powi(2);
            }
        }
        expect /= 5.0;
        let got = ae_loss(&ae, &batch).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert!((ae.loss_and_grads(&batch).unwrap().0 - expect).abs() < 1e-9);
        assert!(got >= 0.0);
    }

    #[test]
    fn zero_decoder_gives_squared_norm() {
        let mut ae = Autoencoder::new(5);
        for p in ae.decoder.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_batch(6, 1);
        let n2: f64 = x.data().iter().map(|v| v * v).sum();
        assert!((ae_loss(&ae, &x).unwrap() - n2).abs() < 1e-12);
        assert!(ae_loss(&ae, &Tensor::zeros(&[0, SEMANTIC_DIM])).is_err());
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let mut ae = Autoencoder::new(7);
        let batch = random_batch(8, 8);
        let mut adam = Adam::new(1e-5, ae.params());
        for _ in 0..5 {
            let (before, grads) = ae.loss_and_grads(&batch).unwrap();
            adam.step(ae.params_mut(), &grads).unwrap();
            assert!(ae_loss(&ae, &batch).unwrap() <= before);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_arch_check() {
        let ae = Autoencoder::new(9);
        let c = Checkpoint::from_bytes(&ae.to_checkpoint().to_bytes()).unwrap();
        let back = Autoencoder::from_checkpoint(&c).unwrap();
        let x = random_batch(10, 3);
        assert_eq!(ae_loss(&ae, &x).unwrap().to_bits(), ae_loss(&back, &x).unwrap().to_bits());
        let mut bad = c.clone();
        bad.meta.insert("arch".into(), "deadbeef".into());
        assert!(Autoencoder::from_checkpoint(&bad).is_err());
        assert!(matches!(ae.encoder.layers()[0], Layer::Dense(_)));
    }
}
