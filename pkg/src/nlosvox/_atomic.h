/* Saturation-checked atomic add on a uint32 accumulator.
 * Returns 1 (and leaves *p untouched) when old + w would exceed UINT32_MAX. */
#ifndef NLOSVOX_ATOMIC_H
#define NLOSVOX_ATOMIC_H
#include <stdint.h>

static inline int nlos_add_u32(uint32_t *p, uint32_t w)
{
    uint32_t old = __atomic_load_n(p, __ATOMIC_RELAXED);
    do {
        if (old > UINT32_MAX - w)
            return 1;
    } while (!__atomic_compare_exchange_n(p, &old, old + w, 1,
                                          __ATOMIC_RELAXED, __ATOMIC_RELAXED));
    return 0;
}

/* Same contract without atomics, for single-threaded accumulation. */
static inline int nlos_add_u32_plain(uint32_t *p, uint32_t w)
{
    if (*p > UINT32_MAX - w)
        return 1;
    *p += w;
    return 0;
}

#endif
