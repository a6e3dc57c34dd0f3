//! One `--flag` per config key, generated from the key table.

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use xmdpt::config::RunConfig;

/// `(flag, dotted key)` for every config key. The flag is the key name with
/// dashes; the guidance mode is `--guidance-mode`.
pub fn flag_names() -> Vec<(String, String)> {
    RunConfig::KEYS
        .iter()
        .flat_map(|(section, keys)| {
            keys.iter().map(move |k| {
                let flag = match (*section, *k) {
                    ("guidance", "mode") => "guidance-mode".to_string(),
                    _ => k.replace('_', "-"),
                };
                (flag, format!("{section}.{k}"))
            })
        })
        .collect()
}

/// Config overrides given on the command line, in key order.
#[derive(Clone, Debug, Default)]
pub struct ConfigFlags {
    pub overrides: Vec<(String, String)>,
}

impl ConfigFlags {
    pub fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        for (key, value) in &self.overrides {
            cfg.set(key, value)?;
        }
        Ok(())
    }
}

fn flag_id(flag: &str) -> String {
    format!("cfg-{flag}")
}

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = Self::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        for (flag, key) in flag_names() {
            if let Some(v) = m.get_one::<String>(&flag_id(&flag)) {
                self.overrides.push((key, v.clone()));
            }
        }
        if let Some(sets) = m.get_many::<String>("cfg-set") {
            for s in sets {
                let (k, v) = s.split_once('=').ok_or_else(|| {
                    clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("--set expects section.key=value, got {s:?}\n"))
                })?;
                self.overrides.push((k.trim().to_string(), v.to_string()));
            }
        }
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(mut cmd: Command) -> Command {
        for (flag, key) in flag_names() {
            cmd = cmd.arg(
                Arg::new(flag_id(&flag))
                    .long(flag)
                    .value_name("VALUE")
                    .help(format!("Overrides {key}"))
                    .help_heading("Config overrides"),
            );
        }
        cmd.arg(
            Arg::new("cfg-set")
                .long("set")
                .value_name("SECTION.KEY=VALUE")
                .action(clap::ArgAction::Append)
                .help("Overrides any config key")
                .help_heading("Config overrides"),
        )
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
