mod common;

use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::Duration;
use ovinet_core::device::DeviceConfig;
use ovinet_core::netlink::Network;
use ovinet_core::platform::Metric;
use ovinet_core::provisioner::{provision, test_reading, LocalLink, LocalRegistry, ProvisionError, ProvisioningForm};
use ovinet_core::scenario::ScriptedScenes;
use ovinet_core::synthgen::GeneratorParams;
use ovinet_core::time::sim_epoch;
use ovinet_core::Simulation;

fn rig(eggs: u32) -> (LocalLink, LocalRegistry) {
    let mut sim = Simulation::new(sim_epoch(), Network::new(4));
    let mut scenes = ScriptedScenes::new(GeneratorParams::with_seed(8), 2, "p");
    scenes.set(sim_epoch(), eggs);
    sim.add_scripted_device("SN-9", scenes);
    let sim = Arc::new(Mutex::new(sim));
    (
        LocalLink {
            sim: sim.clone(),
            serial: "SN-9".into(),
        },
        LocalRegistry { sim },
    )
}

#[test]
fn each_test_reading_is_ingested_exactly_once() {
    for cfg in [DeviceConfig::example_wifi("p-w"), DeviceConfig::example_lorawan("p-l")] {
        let (mut ctl, mut reg) = rig(2);
        let form = ProvisioningForm::from_config(&cfg);
        provision(&form, Path::new("."), &mut ctl, &mut reg).unwrap();
        // Keep clear of the scheduled readings.
        ctl.sim.lock().unwrap().run_for(Duration::hours(1)).unwrap();
        let mut reports = Vec::new();
        for _ in 0..3 {
            let r = test_reading(&mut ctl, &mut reg).unwrap();
            assert_eq!(r.egg_count, 2);
            assert!(r.delivered, "{:?}: {:?}", cfg.link(), r.warnings);
            reports.push(r);
            ctl.sim.lock().unwrap().run_for(Duration::minutes(5)).unwrap();
        }
        let sim = ctl.sim.lock().unwrap();
        let p = sim.platform();
        for r in &reports {
            // LoRaWAN frames carry no clock, so match on arrival time.
            let hits: Vec<_> = p
                .events()
                .filter(|(_, receipt)| *receipt >= r.ts && *receipt <= r.ts + Duration::seconds(5))
                .collect();
            assert_eq!(hits.len(), 1, "assay {} ingested {} times", r.assay_id, hits.len());
            assert_eq!(hits[0].0.readings[0].egg_count, r.egg_count);
        }
        let ids: Vec<u32> = reports.iter().map(|r| r.assay_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        let stored = p.series().all(&cfg.device_id, Metric::EggCount);
        assert!(stored.len() >= 3);
    }
}

#[test]
fn reprovisioning_is_idempotent() {
    let (mut ctl, mut reg) = rig(0);
    let form = ProvisioningForm::from_config(&DeviceConfig::example_wifi("p-1"));
    provision(&form, Path::new("."), &mut ctl, &mut reg).unwrap();
    let before = {
        let sim = ctl.sim.lock().unwrap();
        (sim.platform().export_jsonl(), sim.device("SN-9").unwrap().store().clone())
    };
    let again = provision(&form, Path::new("."), &mut ctl, &mut reg).unwrap();
    assert!(!again.registered && !again.config_changed);
    let sim = ctl.sim.lock().unwrap();
    assert_eq!(sim.platform().export_jsonl(), before.0);
    assert_eq!(sim.device("SN-9").unwrap().store(), &before.1);
}

#[test]
fn form_from_toml_names_missing_fields() {
    let text = r#"
device_id = "trap-7"
place_type = "field"
installer = "ana"
reading_period_h = 6
tx_per_day = 4

[site]
address = "Ruta 226 km 4"
province = "Buenos Aires"
country = "Argentina"

[responsible]
name = "Lab"

[connectivity]
kind = "lorawan"
dev_eui = "70B3D57ED0051F07"
app_eui = "0000000000000001"

[gps]
lat = -37.3
lon = -59.1
"#;
    let form = ProvisioningForm::from_toml(text).unwrap();
    let err = form.to_config(Path::new(".")).unwrap_err();
    assert_eq!(err.fields(), vec!["connectivity.app_key"]);
    assert!(matches!(err, ProvisionError::Validation(_)));
}
