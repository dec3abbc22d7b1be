//! Encoder-decoder generator and discriminator networks, plus the binary
//! checkpoint format.
//!
//! Both networks share the same skeleton: `depth` stride-2 convolutions down,
//! then `depth` (nearest-2x upsample, 3x3 convolution) stages back up, with no
//! explicit bottleneck. The generator maps [3,H,W] to [C,H,W] class logits
//! (softmax is applied by `forward_generator`); the discriminator maps a
//! [C,H,W] probability map to per-pixel confidences [1,H,W], or to a single
//! [1,1,1] confidence when built with the standard head (global average pool
//! before the sigmoid).

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::types::ProbMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Discriminator output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One confidence per pixel.
    Pixelwise,
    /// Single per-image confidence: global average pool, then sigmoid.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator(HeadKind),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub leaky_slope: f32,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!(
                "base_width must be >= 4, got {}",
                self.base_width
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    Relu,
    Leaky(f32),
}

/// One step of the forward topology descriptor.
#[derive(Debug, Clone)]
enum Layer {
    /// 3x3 convolution referencing weight/bias parameter slots.
    Conv { weight: usize, bias: usize, stride: usize, act: Option<Activation> },
    Upsample2x,
    GlobalAvgPool,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// A concrete network: ordered named parameters plus the layer list that
/// consumes them.
#[derive(Debug, Clone)]
pub struct Network {
    role: Role,
    cfg: NetConfig,
    layers: Vec<Layer>,
    params: Vec<NamedParam>,
}

const KERNEL: usize = 3;

/// Conv stage descriptions (name, in_ch, out_ch, stride, activation) derived
/// from the config; shared by the builders and by checkpoint loading.
fn conv_plan(cfg: &NetConfig, role: Role) -> Vec<(String, usize, usize, usize, Option<Activation>)> {
    let enc_act = match role {
        Role::Generator => Activation::Relu,
        Role::Discriminator(_) => Activation::Leaky(cfg.leaky_slope),
    };
    let final_out = match role {
        Role::Generator => cfg.num_classes,
        Role::Discriminator(_) => 1,
    };
    let mut plan = Vec::new();
    // The discriminator consumes C-channel probability maps.
    let mut ch = match role {
        Role::Generator => cfg.in_channels,
        Role::Discriminator(_) => cfg.num_classes,
    };
    for d in 0..cfg.depth {
        let out = cfg.base_width << d;
        plan.push((format!("enc{d}.conv"), ch, out, 2, Some(enc_act)));
        ch = out;
    }
    for d in 0..cfg.depth {
        let last = d + 1 == cfg.depth;
        let out = if last { final_out } else { cfg.base_width << (cfg.depth - 2 - d) };
        let act = if last { None } else { Some(Activation::Relu) };
        plan.push((format!("dec{d}.conv"), ch, out, 1, act));
        ch = out;
    }
    plan
}

fn assemble(cfg: NetConfig, role: Role) -> (Vec<Layer>, Vec<(String, Vec<usize>)>) {
    let plan = conv_plan(&cfg, role);
    let mut layers = Vec::new();
    let mut param_shapes = Vec::new();
    let depth = cfg.depth;
    for (i, (name, c_in, c_out, stride, act)) in plan.into_iter().enumerate() {
        if i >= depth {
            layers.push(Layer::Upsample2x);
        }
        let weight_slot = param_shapes.len();
        param_shapes.push((format!("{name}.weight"), vec![c_out, c_in, KERNEL, KERNEL]));
        param_shapes.push((format!("{name}.bias"), vec![c_out]));
        layers.push(Layer::Conv { weight: weight_slot, bias: weight_slot + 1, stride, act });
    }
    if let Role::Discriminator(head) = role {
        if head == HeadKind::Standard {
            layers.push(Layer::GlobalAvgPool);
        }
        layers.push(Layer::Sigmoid);
    }
    (layers, param_shapes)
}

fn init_params(shapes: &[(String, Vec<usize>)], seed: u64) -> Vec<NamedParam> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(name, shape)| {
            let tensor = if shape.len() == 4 {
                // He init: std = sqrt(2 / fan_in), fan_in = C_in * kH * kW.
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                Tensor::randn(shape.clone(), (2.0 / fan_in).sqrt(), &mut rng)
            } else {
                Tensor::zeros(shape.clone())
            };
            NamedParam { name: name.clone(), tensor }
        })
        .collect()
}

/// Builds the segmentation generator: [3,H,W] -> [C,H,W] logits.
pub fn build_generator(cfg: NetConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let (layers, shapes) = assemble(cfg, Role::Generator);
    Ok(Network { role: Role::Generator, cfg, layers, params: init_params(&shapes, seed) })
}

/// Builds the discriminator: [C,H,W] probabilities -> confidences.
pub fn build_discriminator(cfg: NetConfig, seed: u64, head: HeadKind) -> Result<Network> {
    cfg.validate()?;
    let role = Role::Discriminator(head);
    let (layers, shapes) = assemble(cfg, role);
    Ok(Network { role, cfg, layers, params: init_params(&shapes, seed) })
}

impl Network {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Expected input channel count: 3 for the generator, C for the
    /// discriminator (it consumes probability maps).
    pub fn input_channels(&self) -> usize {
        match self.role {
            Role::Generator => self.cfg.in_channels,
            Role::Discriminator(_) => self.cfg.num_classes,
        }
    }

    /// Clones the network with replacement parameter values (shapes checked).
    pub fn with_param_values(&self, values: &[Vec<f32>]) -> Result<Network> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter buffers, got {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut out = self.clone();
        for (param, vals) in out.params.iter_mut().zip(values) {
            if vals.len() != param.tensor.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter '{}' expects {} values, got {}",
                    param.name,
                    param.tensor.numel(),
                    vals.len()
                )));
            }
            param.tensor.values_mut().copy_from_slice(vals);
            param.tensor.clear_grad();
        }
        Ok(out)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.input_channels() {
            return Err(Error::ShapeMismatch(format!(
                "network expects [{},H,W] input, got {shape:?}",
                self.input_channels()
            )));
        }
        let div = 1usize << self.cfg.depth;
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(Error::Geometry(format!(
                "input {}x{} not divisible by 2^depth = {}",
                shape[1], shape[2], div
            )));
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf, in parameter order.
    pub fn register_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Runs the layer stack against previously registered parameter leaves.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        param_ids: &[NodeId],
        input: NodeId,
    ) -> Result<NodeId> {
        self.check_input(tape.shape(input))?;
        let mut cur = input;
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { weight, bias, stride, act } => {
                    let y = tape.conv2d(cur, param_ids[*weight], param_ids[*bias], *stride, 1, 1)?;
                    match act {
                        Some(Activation::Relu) => tape.relu(y),
                        Some(Activation::Leaky(slope)) => tape.leaky_relu(y, *slope),
                        None => y,
                    }
                }
                Layer::Upsample2x => tape.upsample_nearest2x(cur)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(cur)?,
                Layer::Sigmoid => tape.sigmoid(cur),
            };
        }
        Ok(cur)
    }

    /// Convenience: register parameters and run forward in one call.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let param_ids = self.register_params(tape);
        let out = self.forward_with(tape, &param_ids, input)?;
        Ok((out, param_ids))
    }
}

/// Full generator pass on a throwaway tape: image -> per-pixel distribution.
pub fn forward_generator(net: &Network, image: &Tensor) -> Result<ProbMap> {
    if net.role != Role::Generator {
        return Err(Error::Config("forward_generator requires a generator network".into()));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(image);
    let (logits, _) = net.forward_on_tape(&mut tape, input)?;
    let probs = tape.softmax_channels(logits)?;
    ProbMap::new(tape.tensor(probs))
}

/// Full discriminator pass on a throwaway tape: probability map -> confidences.
pub fn forward_discriminator(net: &Network, probmap: &Tensor) -> Result<Tensor> {
    if !matches!(net.role, Role::Discriminator(_)) {
        return Err(Error::Config("forward_discriminator requires a discriminator".into()));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(probmap);
    let (conf, _) = net.forward_on_tape(&mut tape, input)?;
    Ok(tape.tensor(conf))
}

// ── checkpoint format ────────────────────────────────────────────────────
//
// Magic "ASEG", version u32, tensor count u32, then per tensor:
// name length u32 + UTF-8 name, rank u32, dims u32 each, f32 LE payload.
// All integers little-endian. Round-trips are bit-exact.

const MAGIC: &[u8; 4] = b"ASEG";
const VERSION: u32 = 1;
const META_NAME: &str = "__meta__";

pub fn write_records(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, tensor) in records {
        let name_bytes = name.as_bytes();
        file.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        file.write_all(name_bytes)?;
        file.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            file.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic bytes {magic:?}")));
    }
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut file)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut file)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("invalid tensor name: {e}")))?;
        let rank = read_u32(&mut file)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut file)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = vec![0.0f32; numel];
        let mut buf = [0u8; 4];
        for v in &mut values {
            file.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push((name, Tensor::new(shape, values)?));
    }
    Ok(records)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl Network {
    /// Serializes the network as named tensor records (meta first), with an
    /// optional name prefix so several networks can share one file.
    pub fn to_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let role_code = match self.role {
            Role::Generator => 0.0,
            Role::Discriminator(HeadKind::Pixelwise) => 1.0,
            Role::Discriminator(HeadKind::Standard) => 2.0,
        };
        let meta = Tensor::new(
            vec![6],
            vec![
                self.cfg.in_channels as f32,
                self.cfg.num_classes as f32,
                self.cfg.base_width as f32,
                self.cfg.depth as f32,
                self.cfg.leaky_slope,
                role_code,
            ],
        )
        .unwrap();
        let mut records = vec![(format!("{prefix}{META_NAME}"), meta)];
        for p in &self.params {
            let mut t = p.tensor.clone();
            t.clear_grad();
            records.push((format!("{prefix}{}", p.name), t));
        }
        records
    }

    /// Rebuilds a network from records carrying the given prefix.
    pub fn from_records(records: &[(String, Tensor)], prefix: &str) -> Result<Network> {
        let meta_name = format!("{prefix}{META_NAME}");
        let meta = records
            .iter()
            .find(|(n, _)| *n == meta_name)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta record '{meta_name}'")))?;
        let m = meta.1.values();
        if m.len() != 6 {
            return Err(Error::Checkpoint("meta record must hold 6 values".into()));
        }
        let cfg = NetConfig {
            in_channels: m[0] as usize,
            num_classes: m[1] as usize,
            base_width: m[2] as usize,
            depth: m[3] as usize,
            leaky_slope: m[4],
        };
        let role = match m[5] as u32 {
            0 => Role::Generator,
            1 => Role::Discriminator(HeadKind::Pixelwise),
            2 => Role::Discriminator(HeadKind::Standard),
            other => return Err(Error::Checkpoint(format!("unknown role code {other}"))),
        };
        cfg.validate()?;
        let (layers, shapes) = assemble(cfg, role);
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let full = format!("{prefix}{name}");
            let rec = records
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{full}'")))?;
            if rec.1.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{full}' has shape {:?}, expected {shape:?}",
                    rec.1.shape()
                )));
            }
            params.push(NamedParam { name: name.clone(), tensor: rec.1.clone() });
        }
        Ok(Network { role, cfg, layers, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(path, &self.to_records(""))
    }

    pub fn load(path: &Path) -> Result<Network> {
        Network::from_records(&read_records(path)?, "")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProbMap;
    use rand::Rng;

    fn cfg(c: usize, width: usize, depth: usize) -> NetConfig {
        NetConfig {
            in_channels: 3,
            num_classes: c,
            base_width: width,
            depth,
            leaky_slope: 0.2,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        Tensor::new(vec![3, h, w], vals).unwrap()
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let a = build_generator(cfg(4, 8, 2), 11).unwrap();
        let b = build_generator(cfg(4, 8, 2), 11).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.values(), pb.tensor.values());
        }
        let c = build_generator(cfg(4, 8, 2), 12).unwrap();
        assert_ne!(a.params()[0].tensor.values(), c.params()[0].tensor.values());
    }

    #[test]
    fn generator_output_shape_contract() {
        let net = build_generator(cfg(4, 8, 2), 3).unwrap();
        let probs = forward_generator(&net, &random_image(32, 32, 1)).unwrap();
        assert_eq!(probs.tensor().shape(), &[4, 32, 32]);
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let net = build_generator(cfg(4, 8, 2), 3).unwrap();
        let img = random_image(30, 32, 1);
        assert!(matches!(forward_generator(&net, &img), Err(Error::Geometry(_))));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = cfg(4, 8, 2);
        let net = build_generator(c, 5).unwrap();
        // enc0 3->8 s2, enc1 8->16 s2, dec0 16->8, dec1 8->4; 3x3 kernels.
        let expect = (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (8 * 16 * 9 + 8) + (4 * 8 * 9 + 4);
        assert_eq!(net.param_count(), expect);

        let d = build_discriminator(c, 5, HeadKind::Pixelwise).unwrap();
        // enc0 4->8, enc1 8->16, dec0 16->8, dec1 8->1.
        let expect_d = (8 * 4 * 9 + 8) + (16 * 8 * 9 + 16) + (8 * 16 * 9 + 8) + (8 * 9 + 1);
        assert_eq!(d.param_count(), expect_d);
    }

    #[test]
    fn generator_probabilities_form_a_simplex() {
        let net = build_generator(cfg(5, 8, 2), 9).unwrap();
        let probs = forward_generator(&net, &random_image(16, 16, 4)).unwrap();
        assert!(ProbMap::new(probs.tensor().clone()).is_ok());
    }

    #[test]
    fn zeroed_head_yields_uniform_distribution() {
        let mut net = build_generator(cfg(4, 8, 2), 9).unwrap();
        let n = net.params().len();
        for p in &mut net.params_mut()[n - 2..] {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let probs = forward_generator(&net, &random_image(16, 16, 4)).unwrap();
        assert!(probs.tensor().values().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn discriminator_head_shapes_and_ranges() {
        let c = cfg(4, 8, 2);
        let pix = build_discriminator(c, 7, HeadKind::Pixelwise).unwrap();
        let std = build_discriminator(c, 7, HeadKind::Standard).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals: Vec<f32> = (0..4 * 32 * 32).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let input = Tensor::new(vec![4, 32, 32], vals).unwrap();

        let conf = forward_discriminator(&pix, &input).unwrap();
        assert_eq!(conf.shape(), &[1, 32, 32]);
        assert!(conf.values().iter().all(|&v| v > 0.0 && v < 1.0));

        let conf_std = forward_discriminator(&std, &input).unwrap();
        assert_eq!(conf_std.shape(), &[1, 1, 1]);
        assert!(conf_std.values()[0] > 0.0 && conf_std.values()[0] < 1.0);
    }

    #[test]
    fn discriminator_zero_final_layer_outputs_half() {
        let mut net = build_discriminator(cfg(4, 8, 2), 7, HeadKind::Pixelwise).unwrap();
        let n = net.params().len();
        for p in &mut net.params_mut()[n - 2..] {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = Tensor::full(vec![4, 16, 16], 0.25);
        let conf = forward_discriminator(&net, &input).unwrap();
        assert!(conf.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn discriminator_rejects_wrong_channel_count() {
        let net = build_discriminator(cfg(4, 8, 2), 7, HeadKind::Pixelwise).unwrap();
        let input = Tensor::full(vec![3, 16, 16], 0.5);
        assert!(matches!(
            forward_discriminator(&net, &input),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut bad = cfg(1, 8, 2);
        assert!(build_generator(bad, 0).is_err());
        bad = cfg(4, 2, 2);
        assert!(build_generator(bad, 0).is_err());
        bad = cfg(4, 8, 0);
        assert!(build_discriminator(bad, 0, HeadKind::Standard).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = build_generator(cfg(4, 8, 2), 123).unwrap();
        let dir = std::env::temp_dir().join("adverseg_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gen.ckpt");
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();

        for (a, b) in net.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.values(), b.tensor.values());
        }
        let img = random_image(16, 16, 2);
        let p1 = forward_generator(&net, &img).unwrap();
        let p2 = forward_generator(&loaded, &img).unwrap();
        assert_eq!(p1.tensor().values(), p2.tensor().values());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn forward_is_reproducible_for_fixed_seed_and_input() {
        let run = || {
            let net = build_generator(cfg(4, 8, 2), 77).unwrap();
            let probs = forward_generator(&net, &random_image(16, 16, 8)).unwrap();
            // Order-sensitive FNV-style hash over the output bits.
            let mut hash: u64 = 0xcbf29ce484222325;
            for &v in probs.tensor().values() {
                hash ^= v.to_bits() as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
            hash
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_reaches_generator_through_discriminator() {
        let gen = build_generator(cfg(4, 8, 2), 31).unwrap();
        let disc = build_discriminator(cfg(4, 8, 2), 32, HeadKind::Pixelwise).unwrap();
        let img = random_image(16, 16, 5);

        let mut tape = Tape::new();
        let x = tape.leaf(&img);
        let (logits, gen_ids) = gen.forward_on_tape(&mut tape, x).unwrap();
        let probs = tape.softmax_channels(logits).unwrap();
        let (conf, _) = disc.forward_on_tape(&mut tape, probs).unwrap();
        let loss = tape.bce_const(conf, true, true);
        tape.backward(loss).unwrap();

        let any_nonzero = gen_ids
            .iter()
            .any(|&id| tape.grad(id).iter().any(|&g| g != 0.0));
        assert!(any_nonzero, "generator must receive gradient through the discriminator");
    }
}
