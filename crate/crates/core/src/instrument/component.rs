use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    SelfAttention,
    CrossAttention,
    FeedForward,
    ResidualStream,
}

impl ComponentKind {
    pub fn is_attention(self) -> bool {
        matches!(self, Self::SelfAttention | Self::CrossAttention)
    }

    fn short(self) -> &'static str {
        match self {
            Self::SelfAttention => "self_attn",
            Self::CrossAttention => "cross_attn",
            Self::FeedForward => "ffn",
            Self::ResidualStream => "resid",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "self_attn" | "self_attention" => Self::SelfAttention,
            "cross_attn" | "cross_attention" => Self::CrossAttention,
            "ffn" | "feed_forward" => Self::FeedForward,
            "resid" | "residual_stream" => Self::ResidualStream,
            _ => return None,
        })
    }
}

/// Address of one interventable unit. `layer` is 1-based.
///
/// String form: `enc.L2.self_attn`, `dec.L18.cross_attn.h13`, `dec.L1.ffn`,
/// `dec.L3.resid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ComponentId {
    pub stack: Stack,
    pub layer: usize,
    pub kind: ComponentKind,
    pub head: Option<usize>,
}

impl ComponentId {
    pub fn new(stack: Stack, layer: usize, kind: ComponentKind) -> Self {
        Self {
            stack,
            layer,
            kind,
            head: None,
        }
    }

    pub fn with_head(self, head: usize) -> Self {
        Self {
            head: Some(head),
            ..self
        }
    }

    /// The component-level address this head belongs to.
    pub fn without_head(self) -> Self {
        Self { head: None, ..self }
    }

    pub fn enc(layer: usize, kind: ComponentKind) -> Self {
        Self::new(Stack::Encoder, layer, kind)
    }

    pub fn dec(layer: usize, kind: ComponentKind) -> Self {
        Self::new(Stack::Decoder, layer, kind)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n_layers = match self.stack {
            Stack::Encoder => config.n_enc_layers,
            Stack::Decoder => config.n_dec_layers,
        };
        if self.kind == ComponentKind::CrossAttention && self.stack == Stack::Encoder {
            return Err(Error::InvalidComponent(format!(
                "{self}: cross attention exists only in the decoder"
            )));
        }
        if self.layer == 0 || self.layer > n_layers {
            return Err(Error::InvalidComponent(format!(
                "{self}: layer must be in 1..={n_layers}"
            )));
        }
        if let Some(h) = self.head {
            if !self.kind.is_attention() {
                return Err(Error::InvalidComponent(format!(
                    "{self}: heads exist only on attention components"
                )));
            }
            if h >= config.n_heads {
                return Err(Error::InvalidComponent(format!(
                    "{self}: head must be < {}",
                    config.n_heads
                )));
            }
        }
        Ok(())
    }

    /// Every component-level and head-level address in canonical order
    /// (encoder first, by layer; within a layer self-attention, its heads,
    /// cross-attention, its heads, feed-forward, residual stream).
    pub fn enumerate(config: &ModelConfig, include_residual: bool) -> Vec<ComponentId> {
        let mut out = Vec::new();
        for (stack, n_layers) in [
            (Stack::Encoder, config.n_enc_layers),
            (Stack::Decoder, config.n_dec_layers),
        ] {
            for layer in 1..=n_layers {
                let mut kinds = vec![ComponentKind::SelfAttention];
                if stack == Stack::Decoder {
                    kinds.push(ComponentKind::CrossAttention);
                }
                kinds.push(ComponentKind::FeedForward);
                if include_residual {
                    kinds.push(ComponentKind::ResidualStream);
                }
                for kind in kinds {
                    let id = ComponentId::new(stack, layer, kind);
                    out.push(id);
                    if kind.is_attention() {
                        out.extend((0..config.n_heads).map(|h| id.with_head(h)));
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stack = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        write!(f, "{stack}.L{}.{}", self.layer, self.kind.short())?;
        if let Some(h) = self.head {
            write!(f, ".h{h}")?;
        }
        Ok(())
    }
}

fn parse_index(part: &str, prefix: char) -> Option<usize> {
    part.strip_prefix(prefix)?.parse().ok()
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidComponent(format!("cannot parse component address {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let stack = match parts[0] {
            "enc" => Stack::Encoder,
            "dec" => Stack::Decoder,
            _ => return Err(bad()),
        };
        let layer = parse_index(parts[1], 'L').ok_or_else(bad)?;
        let kind = ComponentKind::parse(parts[2]).ok_or_else(bad)?;
        let head = match parts.get(3) {
            Some(p) => Some(parse_index(p, 'h').ok_or_else(bad)?),
            None => None,
        };
        Ok(Self {
            stack,
            layer,
            kind,
            head,
        })
    }
}

impl TryFrom<String> for ComponentId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ComponentId> for String {
    fn from(c: ComponentId) -> String {
        c.to_string()
    }
}

/// Glob over component addresses: each dot-separated field may be `*`.
/// `dec.*.cross_attn` matches component-level cross attention in every
/// decoder layer; `dec.L2.cross_attn.h*` matches every head of one layer.
/// A wildcard kind never matches the residual stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentPattern(pub String);

impl ComponentPattern {
    pub fn expand(&self, config: &ModelConfig) -> Result<Vec<ComponentId>> {
        let parts: Vec<&str> = self.0.split('.').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::InvalidComponent(format!("bad pattern {:?}", self.0)));
        }
        let field_ok = |pat: &str, val: &str| pat == "*" || pat == val;
        let out: Vec<ComponentId> = ComponentId::enumerate(config, true)
            .into_iter()
            .filter(|c| {
                let s = c.to_string();
                let cp: Vec<&str> = s.split('.').collect();
                if cp.len() != parts.len() {
                    return false;
                }
                if parts[2] == "*" && c.kind == ComponentKind::ResidualStream {
                    return false;
                }
                parts.iter().zip(&cp).all(|(p, v)| {
                    field_ok(p, v)
                        || (*p == "h*" && v.starts_with('h'))
                        || (*p == "L*" && v.starts_with('L'))
                })
            })
            .collect();
        if out.is_empty() {
            return Err(Error::InvalidComponent(format!(
                "pattern {:?} matches no component",
                self.0
            )));
        }
        Ok(out)
    }
}
