use conveyor_marl::topology::{build_default_preset, load_topology_toml, NodeId, NodeKind, Topology};

/// Bellman-Ford over the raw edge list.
fn bellman_ford(t: &Topology, from: NodeId) -> Vec<Option<u64>> {
    let n = t.nodes().len();
    let mut dist = vec![None; n];
    dist[from.0] = Some(0u64);
    for _ in 0..n {
        let mut changed = false;
        for s in t.segments() {
            if let Some(d) = dist[s.from.0] {
                let nd = d + s.steps as u64;
                if dist[s.to.0].is_none_or(|x| nd < x) {
                    dist[s.to.0] = Some(nd);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    dist
}

#[test]
fn preset_shape() {
    let t = build_default_preset();
    assert_eq!(t.nodes().len(), 34);
    assert_eq!(t.loops().len(), 3);
    assert_eq!(t.incomings().len(), 4);
    assert_eq!(t.storages().len(), 20);
    assert_eq!(t.outgoings().len(), 6);
    assert_eq!(t.junctions().len(), 4);
    for &i in t.incomings() {
        assert_eq!(t.node(i).kind, NodeKind::Incoming);
        assert_eq!(t.node(i).buffer_capacity, 4);
    }
}

#[test]
fn every_pair_cost_matches_bellman_ford() {
    let t = build_default_preset();
    for from in 0..t.nodes().len() {
        let oracle = bellman_ford(&t, NodeId(from));
        for to in 0..t.nodes().len() {
            let got = t.route_cost(NodeId(from), NodeId(to));
            assert_eq!(got, oracle[to], "{from} -> {to}");
            if let Some(cost) = got {
                let route = t.shortest_route(NodeId(from), NodeId(to)).unwrap();
                // The route must be a connected chain from `from` to `to` with that cost.
                let mut at = NodeId(from);
                let mut total = 0u64;
                for seg in &route {
                    let s = t.segment(*seg);
                    assert_eq!(s.from, at);
                    at = s.to;
                    total += s.steps as u64;
                }
                assert_eq!(at, NodeId(to));
                assert_eq!(total, cost);
            }
        }
    }
}

#[test]
fn every_storage_reachable_from_every_incoming_and_back_to_outgoing() {
    let t = build_default_preset();
    for &i in t.incomings() {
        let d = bellman_ford(&t, i);
        for &s in t.storages() {
            assert!(d[s.0].is_some());
        }
    }
    for &s in t.storages() {
        let d = bellman_ford(&t, s);
        for &o in t.outgoings() {
            assert!(d[o.0].is_some());
        }
    }
}

#[test]
fn loop0_incoming_sees_seven_storages() {
    let t = build_default_preset();
    let loop0 = t.incomings().iter().find(|&&i| t.node(i).loop_id.0 == 0).unwrap();
    assert_eq!(t.same_loop_storages(*loop0).unwrap().len(), 7);
    let jn = t.junctions()[0].junction;
    assert!(t.same_loop_storages(jn).is_err());
}

#[test]
fn toml_round_trip_is_identity() {
    let t = build_default_preset();
    let back = load_topology_toml(&t.to_toml()).unwrap();
    assert_eq!(back.to_document(), t.to_document());
}
