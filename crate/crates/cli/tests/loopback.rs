mod common;

use std::path::Path;
use std::time::Duration;

use common::{closed_port, data, silent_port, Server};
use ovinet_cli::client::HttpRegistry;
use ovinet_cli::control::TcpControl;
use ovinet_cli::{exit_code, EXIT_TIMEOUT, EXIT_UNREACHABLE, EXIT_VALIDATION};
use ovinet_core::platform::Metric;
use ovinet_core::provisioner::{provision, test_reading, ProvisionError, ProvisioningForm, RegistryApi};

const T: Duration = Duration::from_secs(20);

fn endpoints(s: &Server, serial: &str) -> (TcpControl, HttpRegistry) {
    (
        TcpControl::new(&s.control(), serial, T).unwrap(),
        HttpRegistry::new(&s.platform(), T).unwrap(),
    )
}

fn form(name: &str) -> ProvisioningForm {
    ProvisioningForm::load(&data(name)).unwrap()
}

#[test]
fn wifi_form_provisions_and_registers_once() {
    let s = Server::start(None, &["SN-A:2"]);
    let (mut ctl, mut reg) = endpoints(&s, "SN-A");
    let f = form("form-wifi.toml");
    let c = provision(&f, Path::new("."), &mut ctl, &mut reg).unwrap();
    assert!(c.registered && c.config_changed);
    assert_eq!(c.serial, "SN-A");
    let rec = reg.device(&c.device_id).unwrap().expect("registered over REST");
    assert_eq!(Some(rec.info.device_id.as_str()), f.device_id.as_deref());

    let export = s.sim.lock().unwrap().platform().export_jsonl();
    let again = provision(&f, Path::new("."), &mut ctl, &mut reg).unwrap();
    assert!(!again.registered && !again.config_changed);
    assert_eq!(s.sim.lock().unwrap().platform().export_jsonl(), export);
}

#[test]
fn test_reading_over_both_links_is_stored_once() {
    let s = Server::start(None, &["SN-A:2", "SN-L:4"]);
    for (serial, file, eggs) in [("SN-A", "form-wifi.toml", 2), ("SN-L", "form-lorawan.toml", 4)] {
        let (mut ctl, mut reg) = endpoints(&s, serial);
        let c = provision(&form(file), Path::new("."), &mut ctl, &mut reg).unwrap();
        // Clear of the scheduled readings so only the assay is in the window.
        s.advance(3600.0);
        let r = test_reading(&mut ctl, &mut reg).unwrap();
        assert_eq!(r.egg_count, eggs, "{serial}");
        assert_eq!(r.assay_id, 1);
        assert!(r.delivered, "{serial}: {:?}", r.warnings);
        let stored = s
            .sim
            .lock()
            .unwrap()
            .platform()
            .query_series(&c.device_id, Metric::EggCount, r.ts, r.ts + chrono::Duration::seconds(60))
            .unwrap();
        assert_eq!(stored.len(), 1, "{serial}: {stored:?}");
    }
}

#[test]
fn duplicate_device_id_is_a_conflict() {
    let s = Server::start(None, &["SN-A", "SN-B"]);
    let f = form("form-wifi.toml");
    let (mut ctl, mut reg) = endpoints(&s, "SN-A");
    provision(&f, Path::new("."), &mut ctl, &mut reg).unwrap();

    let mut other = f.clone();
    other.site.address = Some("Another street 5".into());
    let (mut ctl_b, mut reg_b) = endpoints(&s, "SN-B");
    let err = provision(&other, Path::new("."), &mut ctl_b, &mut reg_b).unwrap_err();
    assert!(matches!(err, ProvisionError::Conflict(_)), "{err:?}");
    assert_eq!(exit_code(&err), EXIT_VALIDATION);
    // The second trap was never touched.
    let b = s.sim.lock().unwrap().device("SN-B").unwrap().config().cloned();
    assert_eq!(b, None);
}

#[test]
fn unprovisioned_and_unknown_targets() {
    let s = Server::start(None, &["SN-A"]);
    let (mut ctl, mut reg) = endpoints(&s, "SN-A");
    let err = test_reading(&mut ctl, &mut reg).unwrap_err();
    assert!(matches!(err, ProvisionError::DeviceFault(_)), "{err:?}");

    let (mut ghost, mut reg) = endpoints(&s, "SN-GHOST");
    let err = provision(&form("form-wifi.toml"), Path::new("."), &mut ghost, &mut reg).unwrap_err();
    assert!(matches!(err, ProvisionError::Unreachable(_)), "{err:?}");
}

#[test]
fn transport_failures_map_to_exit_codes() {
    let mut reg = HttpRegistry::new(&format!("http://{}", closed_port()), T).unwrap();
    let mut ctl = TcpControl::new(&closed_port().to_string(), "SN-A", T).unwrap();
    let err = provision(&form("form-wifi.toml"), Path::new("."), &mut ctl, &mut reg).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_UNREACHABLE, "{err:?}");

    let mut ctl = TcpControl::new(&silent_port().to_string(), "SN-A", Duration::from_millis(300)).unwrap();
    let err = provision(&form("form-wifi.toml"), Path::new("."), &mut ctl, &mut reg).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_TIMEOUT, "{err:?}");
}
