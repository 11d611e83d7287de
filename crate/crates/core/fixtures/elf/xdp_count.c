// Per-port packet counter. Build: clang -O2 -g0 -target bpf -c xdp_count.c
typedef unsigned char __u8;
typedef unsigned short __u16;
typedef unsigned int __u32;
typedef unsigned long long __u64;

#define SEC(n) __attribute__((section(n), used))

struct xdp_md {
	__u32 data;
	__u32 data_end;
	__u32 data_meta;
	__u32 ingress_ifindex;
	__u32 rx_queue_index;
	__u32 egress_ifindex;
};

struct map_def {
	__u32 type, key_size, value_size, max_entries, flags;
};

struct map_def SEC("maps") port_count = { 1, 4, 8, 64, 0 };
struct map_def SEC("maps") if_seen = { 1, 4, 4, 64, 0 };

static void *(*lookup)(void *map, const void *key) = (void *)1;
static long (*update)(void *map, const void *key, const void *value, __u64 flags) = (void *)2;

SEC("xdp")
int count_ports(struct xdp_md *ctx)
{
	__u8 *data = (__u8 *)(long)ctx->data;
	__u8 *end = (__u8 *)(long)ctx->data_end;
	if (data + 34 > end)
		return 1;
	if (*(__u16 *)(data + 12) != 0x0008)
		return 2;
	if (data[23] != 6)
		return 2;
	if (data + 54 > end)
		return 1;
	__u32 port = *(__u16 *)(data + 36);
	__u64 *n = lookup(&port_count, &port);
	if (n)
		__sync_fetch_and_add(n, 1);
	__u32 ifx = ctx->ingress_ifindex;
	update(&if_seen, &ifx, &ifx, 0);
	return 2;
}
