from spikekit.perf import configure_allocator

configure_allocator()
