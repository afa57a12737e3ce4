//! The framed TCP service end to end: real sockets, same protocol, same
//! roundtrip guarantees.

use senscrypt::protocol::ServerNode;
use senscrypt::server::Server;
use senscrypt::sim::SensCryptWorld;
use senscrypt::transport::{TcpChannel, TcpService};

#[test]
fn full_session_over_tcp_roundtrips() {
    let mut world = SensCryptWorld::new(21, 16, 64);
    for _ in 0..5 {
        world.write_random().unwrap();
    }

    // move the server into the socket service for the session
    let node = std::mem::replace(&mut world.server, ServerNode::new(Server::new()));
    let service = TcpService::start(node, "127.0.0.1:0").unwrap();
    service.set_tick(world.tick + 1);

    let mut channel = TcpChannel::connect(service.addr()).unwrap();
    let report = world.upload_via(&mut channel).unwrap();
    assert!(report.session.completed);
    drop(channel);

    world.server = service.stop();
    assert_eq!(world.server_decoded(), world.shadow_data());
    assert_eq!(world.tracker.tracker.red_count(), 0);
}

#[test]
fn concurrent_sessions_from_distinct_trackers() {
    // one server, two trackers, two threads; per-tracker sessions must not
    // interfere
    use senscrypt::fleet::{provision_fleet, FleetConfig};
    use senscrypt::protocol::TrackerNode;
    use senscrypt::relay::{run_senscrypt_session, Base};
    use senscrypt::transcript::Transcript;

    let fleet = provision_fleet(&FleetConfig {
        seed: 77,
        trackers: 2,
        record_count: 8,
        record_len: 32,
        explicit_ids: Vec::new(),
    })
    .unwrap();
    let service = TcpService::start(ServerNode::new(fleet.server), "127.0.0.1:0").unwrap();
    let addr = service.addr();

    let handles: Vec<_> = fleet
        .trackers
        .into_iter()
        .map(|tracker| {
            std::thread::spawn(move || {
                let mut node = TrackerNode::new(tracker);
                for i in 0..4u8 {
                    node.tracker.record_data(&[i; 32]).unwrap();
                }
                let mut base = Base::new(*b"BASEXYZ1", true);
                let mut transcript = Transcript::new();
                let mut channel = TcpChannel::connect(addr).unwrap();
                let report =
                    run_senscrypt_session(&mut base, &mut node, &mut channel, &mut transcript, 1)
                        .unwrap();
                assert!(report.completed);
                assert_eq!(node.tracker.red_count(), 0);
                node.tracker.id()
            })
        })
        .collect();
    let ids: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();

    let node = service.stop();
    for id in ids {
        let entry = node.server.lookup(id).unwrap();
        assert_eq!(node.server.fitness().rows(entry.id_user, id).len(), 4);
    }
}
