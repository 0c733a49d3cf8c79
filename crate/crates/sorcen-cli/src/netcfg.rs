//! `key=value` handling for the network configuration.

use sorcen::model::{DropoutSite, NetworkConfig};
use sorcen::{Result, SorcenError};

pub fn net_to_kv(cfg: &NetworkConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("embed_dim={}\n", cfg.embed_dim));
    s.push_str(&format!("enc_depth={}\n", cfg.enc_depth));
    s.push_str(&format!("dec_depth={}\n", cfg.dec_depth));
    s.push_str(&format!("heads={}\n", cfg.heads));
    s.push_str(&format!("mlp_ratio={}\n", cfg.mlp_ratio));
    s.push_str(&format!("projector_width={}\n", cfg.projector_width));
    s.push_str(&format!("projector_depth={}\n", cfg.projector_depth));
    s.push_str(&format!("predictor_depth={}\n", cfg.predictor_depth));
    s.push_str(&format!("vocab={}\n", cfg.vocab));
    s.push_str(&format!("seq_len={}\n", cfg.seq_len));
    s.push_str(&format!("dropout={}\n", cfg.dropout));
    s.push_str(&format!("dropout_site={}\n", cfg.dropout_site.as_str()));
    s
}

pub fn apply_net_kv(cfg: &mut NetworkConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| SorcenError::invalid(format!("bad value {value:?} for config key {key:?}")))
    }
    match key {
        "embed_dim" => cfg.embed_dim = num(key, value)?,
        "enc_depth" => cfg.enc_depth = num(key, value)?,
        "dec_depth" => cfg.dec_depth = num(key, value)?,
        "heads" => cfg.heads = num(key, value)?,
        "mlp_ratio" => cfg.mlp_ratio = num(key, value)?,
        "projector_width" => cfg.projector_width = num(key, value)?,
        "projector_depth" => cfg.projector_depth = num(key, value)?,
        "predictor_depth" => cfg.predictor_depth = num(key, value)?,
        "dropout" => cfg.dropout = num(key, value)?,
        "dropout_site" => cfg.dropout_site = DropoutSite::parse(value)?,
        other => return Err(SorcenError::invalid(format!("unknown network config key {other:?}"))),
    }
    Ok(())
}
