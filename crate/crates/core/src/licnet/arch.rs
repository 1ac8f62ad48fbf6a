use std::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::{ConvGeometry, ConvKind};

/// Which transform a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Encoder,
    HyperEncoder,
    HyperDecoder,
    Decoder,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::HyperEncoder => 1,
            Role::HyperDecoder => 2,
            Role::Decoder => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Role::Encoder,
            1 => Role::HyperEncoder,
            2 => Role::HyperDecoder,
            3 => Role::Decoder,
            _ => return Err(Error::Format(format!("unknown layer role {c}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub role: Role,
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

impl LayerSpec {
    fn conv(role: Role, cin: usize, cout: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        Self {
            role,
            kind: ConvKind::Forward,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
            relu,
        }
    }

    /// Exact 2x upsampling (`kernel = 2 * stride`, `padding = stride / 2`).
    fn deconv(role: Role, cin: usize, cout: usize, relu: bool) -> Self {
        Self {
            role,
            kind: ConvKind::Transposed,
            in_channels: cin,
            out_channels: cout,
            kernel: 4,
            stride: 2,
            padding: 1,
            relu,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kind: self.kind,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn fan_in(&self) -> usize {
        let taps = self.in_channels * self.kernel * self.kernel;
        match self.kind {
            ConvKind::Forward => taps,
            ConvKind::Transposed => (taps / (self.stride * self.stride)).max(1),
        }
    }
}

/// Layer list of the codec, stored encoder, hyper-encoder, hyper-decoder, decoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub latent_channels: usize,
    pub hyper_channels: usize,
}

pub const LATENT_CHANNELS: usize = 32;
pub const HIDDEN_CHANNELS: usize = 16;
pub const HYPER_CHANNELS: usize = 16;
/// Total downsampling of the analysis transform.
pub const DOWNSAMPLING: usize = 16;

impl Architecture {
    /// Four stride-2 convolutions down to a 32-channel latent and the mirrored
    /// transposed stack back up, optionally with a two-layer hyperprior pair.
    pub fn toy(hyperprior: bool) -> Self {
        use Role::*;
        let (c, h, n) = (LATENT_CHANNELS, HIDDEN_CHANNELS, HYPER_CHANNELS);
        let mut layers = vec![
            LayerSpec::conv(Encoder, 1, h, 5, 2, true),
            LayerSpec::conv(Encoder, h, h, 3, 2, true),
            LayerSpec::conv(Encoder, h, h, 3, 2, true),
            LayerSpec::conv(Encoder, h, c, 3, 2, false),
        ];
        if hyperprior {
            layers.push(LayerSpec::conv(HyperEncoder, c, n, 3, 1, true));
            layers.push(LayerSpec::conv(HyperEncoder, n, n, 3, 2, false));
            layers.push(LayerSpec::deconv(HyperDecoder, n, n, true));
            layers.push(LayerSpec::conv(HyperDecoder, n, c, 3, 1, false));
        }
        layers.extend([
            LayerSpec::deconv(Decoder, c, h, true),
            LayerSpec::deconv(Decoder, h, h, true),
            LayerSpec::deconv(Decoder, h, h, true),
            LayerSpec::deconv(Decoder, h, 1, false),
        ]);
        Self {
            layers,
            latent_channels: c,
            hyper_channels: n,
        }
    }

    pub fn hyperprior(&self) -> bool {
        self.layers.iter().any(|l| l.role == Role::HyperEncoder)
    }

    pub fn range(&self, role: Role) -> Range<usize> {
        let start = self
            .layers
            .iter()
            .position(|l| l.role == role)
            .unwrap_or(self.layers.len());
        let len = self.layers.iter().filter(|l| l.role == role).count();
        start..start + len
    }

    pub fn validate(&self) -> Result<()> {
        for role in [
            Role::Encoder,
            Role::HyperEncoder,
            Role::HyperDecoder,
            Role::Decoder,
        ] {
            let r = self.range(role);
            if self.layers[r.clone()].iter().any(|l| l.role != role) {
                return Err(Error::Format("layer roles are not contiguous".into()));
            }
            for pair in self.layers[r].windows(2) {
                if pair[0].out_channels != pair[1].in_channels {
                    return Err(Error::Format("channel counts do not chain".into()));
                }
            }
        }
        let enc = self.range(Role::Encoder);
        let dec = self.range(Role::Decoder);
        if enc.is_empty() || dec.is_empty() {
            return Err(Error::Format("encoder and decoder must be present".into()));
        }
        if self.layers[enc.end - 1].out_channels != self.latent_channels
            || self.layers[dec.start].in_channels != self.latent_channels
        {
            return Err(Error::Format("latent channel count mismatch".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_architecture_shapes() {
        for hyper in [false, true] {
            let a = Architecture::toy(hyper);
            a.validate().unwrap();
            assert_eq!(a.hyperprior(), hyper);
            let mut size = 64;
            for l in &a.layers[a.range(Role::Encoder)] {
                size = l.geometry().output_len(size, l.kernel).unwrap();
            }
            assert_eq!(size, 64 / DOWNSAMPLING);
            for l in &a.layers[a.range(Role::Decoder)] {
                size = l.geometry().output_len(size, l.kernel).unwrap();
            }
            assert_eq!(size, 64);
        }
    }
}
