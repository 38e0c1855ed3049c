"""Walk one vehicle through the life of its data on a 15-RSI network.

Run with ``python3 demos/walkthrough.py``. Each step prints what changed.
"""

from speedychain import crypto
from speedychain.harness import Scenario, bootstrap_all, build_network
from speedychain.ledger import header_hash, make_transaction, validate_chain
from speedychain.protocol import TxSubmit


def main() -> None:
    s = Scenario(blockchain_size=3, expiration_window=4_000, kui_period=1_000, timer="model")
    net = build_network(s)
    car = net.vehicles["veh-0000"]
    home = net.rsis[net.sim.nearest_rsi(car.id)]

    print("1. Vehicles pick fresh keys and ask the nearest RSI for a block.")
    bootstrap_all(net)
    net.sim.run_until_quiescent(max_time=1_500)
    block = home.chain.find_block(car.keypair.public)
    print(f"   {car.id} joined via {home.id}; block {home.chain.position(car.keypair.public)} "
          f"of {len(home.chain)}, expires at {block.header.expiration} ms")

    print("2. The car reports readings; every RSI appends them to its block.")
    frozen = header_hash(block.header)
    for k in range(5):
        net.sim.wake(car.id, 1_600 + 20 * k, "emit", b"speed=%d" % (40 + k))
    net.sim.run_until_quiescent(max_time=1_800)
    print(f"   ledger length {len(block)}; header hash unchanged: {header_hash(block.header) == frozen}")
    print(f"   all 15 chains identical: {net.chains_identical()}")

    print("3. A forged reading signed with someone else's key is refused.")
    thief = crypto.generate_keypair()
    forged = make_transaction(thief, block.tail_hash, b"speed=200", car.geotag, int(net.sim.now))
    replies = home.handle_tx(TxSubmit(car.keypair.public, forged), car.id, net.sim.now)
    print(f"   reply: reject, {replies[0].message.reason.name}")

    print("4. The KUI tick hands the car the Merkle root and its membership proof.")
    print(f"   proof verifies: {crypto.merkle_verify(car.merkle_root, crypto.digest(car.keypair.public), car.membership_proof)}")

    print("5. The car rotates keys once its block expires; the old key stops counting.")
    old_pk, old_proof = car.keypair.public, car.membership_proof
    net.sim.wake(car.id, net.sim.now + 1, "rotate")
    net.sim.run_until_quiescent(max_time=car.key_expiry + 1_500)
    print(f"   new key differs: {car.keypair.public != old_pk}; "
          f"old proof accepted by new root: {crypto.merkle_verify(car.merkle_root, crypto.digest(old_pk), old_proof)}")

    net.run()
    print(f"6. Quiescent; every chain validates: {all(validate_chain(r.chain) for r in net.rsis.values())}")


if __name__ == "__main__":
    main()
