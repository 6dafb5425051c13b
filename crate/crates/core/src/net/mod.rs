//! CONV / IRU / ASC / ASPP blocks and the encoder-decoder network.

pub mod blocks;
pub mod config;
pub mod network;
pub mod weights;

pub use blocks::{
    asc_forward, aspp_forward, block_params, iru_forward, Mode, ParamKind, ParamSpec, ParamStore,
};
pub use config::{ArchitectureConfig, BlockKind, BlockSpec};
pub use network::{Architecture, Network, NetworkProbe, TrainPass};
pub use weights::{NamedArray, WeightFile, CPW_MAGIC};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_has_503377_trainable_params() {
        let net = Network::build(ArchitectureConfig::full(), 0).unwrap();
        assert_eq!(net.count_params(), 503_377);
        assert_eq!(net.architecture().count_params(), 503_377);
    }
}
