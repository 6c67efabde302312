//! Parameter counts of the model presets.

use speatforge::model::ModelConfig;

pub fn main() -> anyhow::Result<()> {
    for name in ["small", "slim", "base", "tiny"] {
        let c = ModelConfig::by_name(name)?;
        println!(
            "{name:>5}: {:>2} layers, d_m {:>3}, f_s {:>4}, {:>2} heads -> {:>10} params ({} prunable)",
            c.n_layers,
            c.hidden_dim,
            c.ffw_dim,
            c.n_heads,
            c.parameter_count(),
            c.prunable_count()
        );
    }
    Ok(())
}
