// Two signed chains that reference each other, then a check that the
// order between pulses on different chains can be proven.
#include <iostream>

#include "beacon/twine.hpp"

using namespace beacon;

int main() {
  twine::MemoryResolver store;
  auto alice_key = crypto::SigningKey::generate(crypto::SigAlg::ES256);
  auto bob_key = crypto::SigningKey::generate(crypto::SigAlg::ES256);
  auto [alice, alice_cid] = twine::build_chain(alice_key, "alice", cbor::Map{}, 10);
  auto [bob, bob_cid] = twine::build_chain(bob_key, "bob", cbor::Map{}, 10);
  store.put(alice_cid, alice.bytes());
  store.put(bob_cid, bob.bytes());

  auto [a0, a0_cid] = twine::build_pulse(alice, std::nullopt, store, {}, cbor::Map{{"note", "first"}},
                                         twine::kTwineSpec, alice_key);
  store.put(a0_cid, a0.bytes());
  // Bob mixes in Alice's pulse, so anything Bob publishes later comes after it.
  auto [b0, b0_cid] = twine::build_pulse(bob, std::nullopt, store, {{alice_cid, a0_cid}}, cbor::Map{{"note", "reply"}},
                                         twine::kTwineSpec, bob_key);
  store.put(b0_cid, b0.bytes());

  auto report = twine::verify_pulse(b0, b0_cid, bob, store);
  std::cout << "bob pulse " << b0_cid.to_string() << (report.ok() ? " verifies" : " does not verify") << "\n";
  auto proof = twine::prove_order(a0_cid, b0_cid, store);
  if (!proof || !twine::verify_order_proof(*proof, store)) {
    std::cout << "no order proof\n";
    return 1;
  }
  std::cout << "alice's pulse precedes bob's, path length " << proof->path.size() << "\n";
  return report.ok() ? 0 : 1;
}
