//! Staged residual convolutional feature extractor.

use super::BackboneSpec;
use crate::nn::Graph;
use crate::tensor::{ParamStore, Real, Result, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Image,
    Lidar,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Image => "image",
            Stream::Lidar => "lidar",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Stream::Image => 3,
            Stream::Lidar => 2,
        }
    }

    fn blocks(self, spec: &BackboneSpec) -> usize {
        match self {
            Stream::Image => spec.image_blocks,
            Stream::Lidar => spec.lidar_blocks,
        }
    }
}

fn register_conv<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    bias: bool,
) -> Result<()> {
    let fan_in = c_in * k * k;
    store.init_uniform(seed, &format!("{name}.w"), &[c_out, c_in, k, k], fan_in)?;
    if bias {
        store.init_uniform(seed, &format!("{name}.b"), &[c_out], fan_in)?;
    }
    Ok(())
}

/// Registers stem and stage parameters for one stream.
pub fn register_backbone<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    spec: &BackboneSpec,
    stream: Stream,
) -> Result<()> {
    let p = stream.prefix();
    register_conv(store, seed, &format!("{p}.stem"), stream.in_channels(), spec.stem_channels, 3, true)?;
    let mut c_in = spec.stem_channels;
    for (k, &c) in spec.stage_channels.iter().enumerate() {
        for j in 0..stream.blocks(spec) {
            let name = format!("{p}.stage{}.block{j}", k + 1);
            let block_in = if j == 0 { c_in } else { c };
            register_conv(store, seed, &format!("{name}.conv1"), block_in, c, 3, true)?;
            register_conv(store, seed, &format!("{name}.conv2"), c, c, 3, true)?;
            if block_in != c {
                register_conv(store, seed, &format!("{name}.skip"), block_in, c, 1, false)?;
            }
        }
        c_in = c;
    }
    Ok(())
}

fn conv<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, pad: usize, bias: bool) -> Result<Var> {
    let w = g.p(&format!("{name}.w"))?;
    let y = g.tape.conv2d(x, w, 1, pad)?;
    if bias {
        let b = g.p(&format!("{name}.b"))?;
        g.tape.add_channel(y, b)
    } else {
        Ok(y)
    }
}

fn pool<T: Real>(g: &mut Graph<'_, T>, x: Var, factor: usize) -> Result<Var> {
    if factor == 1 {
        return Ok(x);
    }
    let s = g.tape.shape(x).to_vec();
    g.tape.avgpool2d(x, s[1] / factor, s[2] / factor)
}

/// Stage-by-stage forward for one stream, so fusion can interleave.
pub struct Backbone<'s> {
    spec: &'s BackboneSpec,
    stream: Stream,
}

impl<'s> Backbone<'s> {
    pub fn new(spec: &'s BackboneSpec, stream: Stream) -> Self {
        Self { spec, stream }
    }

    /// Input pooling, 3×3 stem convolution with ReLU, stem pooling.
    pub fn stem<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let x = pool(g, x, self.spec.input_pool)?;
        let y = conv(g, &format!("{}.stem", self.stream.prefix()), x, 1, true)?;
        let y = g.tape.relu(y)?;
        pool(g, y, self.spec.stem_pool)
    }

    /// Stage `k` (1-based): entry pooling then residual blocks
    /// `relu(conv2(relu(conv1(x))) + skip(x))`.
    pub fn stage<T: Real>(&self, g: &mut Graph<'_, T>, k: usize, x: Var) -> Result<Var> {
        let mut x = pool(g, x, self.spec.stage_pools[k - 1])?;
        let c = self.spec.stage_channels[k - 1];
        for j in 0..self.stream.blocks(self.spec) {
            let name = format!("{}.stage{k}.block{j}", self.stream.prefix());
            let h = conv(g, &format!("{name}.conv1"), x, 1, true)?;
            let h = g.tape.relu(h)?;
            let h = conv(g, &format!("{name}.conv2"), h, 1, true)?;
            let skip = if g.tape.shape(x)[0] != c {
                conv(g, &format!("{name}.skip"), x, 0, false)?
            } else {
                x
            };
            let s = g.tape.add(h, skip)?;
            x = g.tape.relu(s)?;
        }
        Ok(x)
    }

    /// Global average pool of a `C×h×w` map to a `1×C` row.
    pub fn global_pool<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.tape.shape(x)[0];
        let p = g.tape.avgpool2d(x, 1, 1)?;
        g.tape.reshape(p, &[1, c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn desk_stage_shapes() {
        let spec = BackboneSpec::desk();
        for stream in [Stream::Image, Stream::Lidar] {
            let mut store = ParamStore::<f32>::new();
            register_backbone(&mut store, 3, &spec, stream).unwrap();
            let mut g = Graph::inference(&store);
            let x = g.constant(Tensor::full(&[stream.in_channels(), 64, 64], 0.5));
            let mut y = Backbone::new(&spec, stream).stem(&mut g, x).unwrap();
            let sizes = spec.stage_sizes(64);
            for k in 1..=4 {
                y = Backbone::new(&spec, stream).stage(&mut g, k, y).unwrap();
                assert_eq!(g.value(y).shape(), &[spec.stage_channels[k - 1], sizes[k - 1], sizes[k - 1]]);
            }
            let f = Backbone::global_pool(&mut g, y).unwrap();
            assert_eq!(g.value(f).shape(), &[1, 16]);
            assert!(g.value(f).is_finite());
        }
    }

    #[test]
    fn image_stream_is_deeper() {
        let spec = BackboneSpec::desk();
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        register_backbone(&mut a, 0, &spec, Stream::Image).unwrap();
        register_backbone(&mut b, 0, &spec, Stream::Lidar).unwrap();
        assert!(a.names().any(|n| n == "image.stage4.block1.conv2.w"));
        assert!(!b.names().any(|n| n.contains("block1")));
        assert!(a.count() > b.count());
    }
}
