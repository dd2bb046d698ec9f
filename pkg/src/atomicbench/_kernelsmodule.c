/* Native measured loops and cache/timer primitives.
 *
 * Every timed region runs with the GIL released so that pinned Python
 * threads execute these loops truly concurrently.  Timestamps come from a
 * serialized TSC read where the CPU advertises an invariant TSC, otherwise
 * from CLOCK_MONOTONIC (the Python layer records which source is active).
 *
 * Measured entry points share one contract: spin until `deadline` (ticks,
 * 0 = start immediately), then stamp t_start, run exactly one pass of the
 * loop, stamp t_end, and report (t_enter, t_start, t_end, ops, successes,
 * failures, sink).  `sink` defeats dead-code elimination and doubles as a
 * checksum for tests.
 */

#define PY_SSIZE_T_CLEAN
#include <Python.h>

#include <sched.h>
#include <stdint.h>
#include <string.h>
#include <time.h>

#if defined(__x86_64__) || defined(__i386__)
#include <cpuid.h>
#include <emmintrin.h>
#include <immintrin.h>
#define AB_X86 1
#else
#define AB_X86 0
#endif

/* ---------------------------------------------------------------- timer */

static int ab_use_tsc = 0; /* decided at module init */

static inline uint64_t
ab_monotonic_ns(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000000ull + (uint64_t)ts.tv_nsec;
}

#if AB_X86
static inline uint64_t
ab_rdtscp(void)
{
    unsigned lo, hi, aux;
    __asm__ volatile("rdtscp" : "=a"(lo), "=d"(hi), "=c"(aux)::"memory");
    __asm__ volatile("lfence" ::: "memory");
    return ((uint64_t)hi << 32) | lo;
}
#endif

static inline uint64_t
ab_now(void)
{
#if AB_X86
    if (ab_use_tsc)
        return ab_rdtscp();
#endif
    return ab_monotonic_ns();
}

static inline void
ab_cpu_relax(void)
{
#if AB_X86
    _mm_pause();
#endif
}

/* Spin until the tick deadline.  Far from the deadline we sleep in small
 * bounded chunks so sibling workers can reach their own spin loops on
 * oversubscribed hosts (sched_yield can park a thread for a whole quantum
 * on some kernels); close to it we busy-wait for a tight common start. */
static inline uint64_t
ab_spin_until(uint64_t deadline)
{
    uint64_t t = ab_now();
    if (deadline == 0)
        return t;
    while (t < deadline) {
        if (deadline - t > 2000000) { /* > ~1-2 ms at any plausible rate */
            struct timespec ts = {0, 500000}; /* 0.5 ms */
            nanosleep(&ts, NULL);
        } else {
            ab_cpu_relax();
        }
        t = ab_now();
    }
    return t;
}

/* ------------------------------------------------------------ utilities */

enum {
    OP_READ = 0,
    OP_WRITE = 1,
    OP_CAS = 2,
    OP_FAA = 3,
    OP_SWP = 4,
    OP_CAS_SUCCEED = 5,
    OP_CAS_FAIL = 6,
};

struct kres {
    uint64_t t_enter, t_start, t_end;
    uint64_t ops, successes, failures, sink;
};

static PyObject *
kres_tuple(const struct kres *r)
{
    return Py_BuildValue("(KKKKKKK)", (unsigned long long)r->t_enter,
                         (unsigned long long)r->t_start,
                         (unsigned long long)r->t_end,
                         (unsigned long long)r->ops,
                         (unsigned long long)r->successes,
                         (unsigned long long)r->failures,
                         (unsigned long long)r->sink);
}

static int
get_buffer(PyObject *obj, Py_buffer *view, int writable)
{
    int flags = writable ? (PyBUF_SIMPLE | PyBUF_WRITABLE) : PyBUF_SIMPLE;
    if (PyObject_GetBuffer(obj, view, flags) != 0)
        return -1;
    return 0;
}

static int
check_off(const Py_buffer *view, uint64_t off, uint64_t width)
{
    if (off + width > (uint64_t)view->len) {
        PyErr_SetString(PyExc_ValueError, "offset out of buffer bounds");
        return -1;
    }
    return 0;
}

/* ------------------------------------------------------------ module fns */

static PyObject *
py_now(PyObject *self, PyObject *noargs)
{
    return PyLong_FromUnsignedLongLong(ab_now());
}

static PyObject *
py_timer_source(PyObject *self, PyObject *noargs)
{
    return PyUnicode_FromString(ab_use_tsc ? "tsc" : "monotonic");
}

static PyObject *
py_arch(PyObject *self, PyObject *noargs)
{
    return PyUnicode_FromString(AB_X86 ? "x86_64" : "other");
}

static PyObject *
py_has_cas128(PyObject *self, PyObject *noargs)
{
#if AB_X86
    unsigned eax, ebx, ecx, edx;
    if (__get_cpuid(1, &eax, &ebx, &ecx, &edx) && ((ecx >> 13) & 1))
        Py_RETURN_TRUE;
#endif
    Py_RETURN_FALSE;
}

/* --- single-shot atomics (semantic tests, small fix-ups) --- */

static PyObject *
py_cas64(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long off, expected, desired;
    if (!PyArg_ParseTuple(args, "OKKK", &obj, &off, &expected, &desired))
        return NULL;
    Py_buffer view;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    if (check_off(&view, off, 8) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    uint64_t exp = expected;
    int ok = __atomic_compare_exchange_n(
        (uint64_t *)((char *)view.buf + off), &exp, (uint64_t)desired, 0,
        __ATOMIC_SEQ_CST, __ATOMIC_SEQ_CST);
    PyBuffer_Release(&view);
    return Py_BuildValue("(iK)", ok, (unsigned long long)exp);
}

static PyObject *
py_faa64(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long off;
    long long addend;
    if (!PyArg_ParseTuple(args, "OKL", &obj, &off, &addend))
        return NULL;
    Py_buffer view;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    if (check_off(&view, off, 8) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    uint64_t old = __atomic_fetch_add((uint64_t *)((char *)view.buf + off),
                                      (uint64_t)(int64_t)addend,
                                      __ATOMIC_SEQ_CST);
    PyBuffer_Release(&view);
    return PyLong_FromUnsignedLongLong(old);
}

static PyObject *
py_swp64(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long off, value;
    if (!PyArg_ParseTuple(args, "OKK", &obj, &off, &value))
        return NULL;
    Py_buffer view;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    if (check_off(&view, off, 8) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    uint64_t old = __atomic_exchange_n((uint64_t *)((char *)view.buf + off),
                                       (uint64_t)value, __ATOMIC_SEQ_CST);
    PyBuffer_Release(&view);
    return PyLong_FromUnsignedLongLong(old);
}

static PyObject *
py_load64(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long off;
    if (!PyArg_ParseTuple(args, "OK", &obj, &off))
        return NULL;
    Py_buffer view;
    if (get_buffer(obj, &view, 0) != 0)
        return NULL;
    if (check_off(&view, off, 8) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    uint64_t v = *(volatile uint64_t *)((char *)view.buf + off);
    PyBuffer_Release(&view);
    return PyLong_FromUnsignedLongLong(v);
}

static PyObject *
py_store64(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long off, value;
    if (!PyArg_ParseTuple(args, "OKK", &obj, &off, &value))
        return NULL;
    Py_buffer view;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    if (check_off(&view, off, 8) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    *(volatile uint64_t *)((char *)view.buf + off) = value;
    PyBuffer_Release(&view);
    Py_RETURN_NONE;
}

/* --- coherency-recipe helpers (not timed, GIL released) --- */

static PyObject *
py_flush_lines(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long line;
    if (!PyArg_ParseTuple(args, "OK", &obj, &line))
        return NULL;
    if (line == 0) {
        PyErr_SetString(PyExc_ValueError, "line size must be positive");
        return NULL;
    }
    Py_buffer view;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
#if AB_X86
    Py_BEGIN_ALLOW_THREADS;
    {
        char *p = (char *)view.buf;
        for (Py_ssize_t o = 0; o < view.len; o += (Py_ssize_t)line)
            __builtin_ia32_clflush(p + o);
        __builtin_ia32_mfence();
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&view);
    Py_RETURN_TRUE;
#else
    PyBuffer_Release(&view);
    Py_RETURN_FALSE; /* caller falls back to an eviction sweep */
#endif
}

static PyObject *
py_read_sweep(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long stride;
    if (!PyArg_ParseTuple(args, "OK", &obj, &stride))
        return NULL;
    if (stride < 8) {
        PyErr_SetString(PyExc_ValueError, "stride must be >= 8");
        return NULL;
    }
    Py_buffer view;
    if (get_buffer(obj, &view, 0) != 0)
        return NULL;
    uint64_t sink = 0;
    Py_BEGIN_ALLOW_THREADS;
    {
        char *p = (char *)view.buf;
        for (Py_ssize_t o = 0; o + 8 <= view.len; o += (Py_ssize_t)stride)
            sink += *(volatile uint64_t *)(p + o);
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&view);
    return PyLong_FromUnsignedLongLong(sink);
}

/* Re-store each line's first word with its own value: dirties the line
 * without changing buffer contents (the M-state recipe). */
static PyObject *
py_rewrite_lines(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long stride;
    if (!PyArg_ParseTuple(args, "OK", &obj, &stride))
        return NULL;
    if (stride < 8) {
        PyErr_SetString(PyExc_ValueError, "stride must be >= 8");
        return NULL;
    }
    Py_buffer view;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    Py_BEGIN_ALLOW_THREADS;
    {
        char *p = (char *)view.buf;
        for (Py_ssize_t o = 0; o + 8 <= view.len; o += (Py_ssize_t)stride) {
            volatile uint64_t *w = (volatile uint64_t *)(p + o);
            *w = *w;
        }
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&view);
    Py_RETURN_NONE;
}

static PyObject *
py_touch_pages(PyObject *self, PyObject *args)
{
    PyObject *obj;
    unsigned long long page;
    if (!PyArg_ParseTuple(args, "OK", &obj, &page))
        return NULL;
    if (page == 0) {
        PyErr_SetString(PyExc_ValueError, "page size must be positive");
        return NULL;
    }
    Py_buffer view;
    if (get_buffer(obj, &view, 0) != 0)
        return NULL;
    uint64_t n = 0, sink = 0;
    Py_BEGIN_ALLOW_THREADS;
    {
        char *p = (char *)view.buf;
        for (Py_ssize_t o = 0; o < view.len; o += (Py_ssize_t)page) {
            sink += *(volatile unsigned char *)(p + o);
            n++;
        }
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&view);
    (void)sink;
    return PyLong_FromUnsignedLongLong(n);
}

/* --- latency kernels --- */

/* Data-dependent pointer chase for read / FAA / SWP: each slot's first word
 * holds the byte offset of the next slot, so the operation's result is the
 * next address and execution is fully serialized. */
static PyObject *
py_lat_chase(PyObject *self, PyObject *args)
{
    int op;
    PyObject *obj;
    unsigned long long start, nops, deadline;
    long long addend;
    if (!PyArg_ParseTuple(args, "iOKKLK", &op, &obj, &start, &nops, &addend,
                          &deadline))
        return NULL;
    if (op != OP_READ && op != OP_FAA && op != OP_SWP) {
        PyErr_SetString(PyExc_ValueError, "lat_chase supports read/faa/swp");
        return NULL;
    }
    Py_buffer view;
    if (get_buffer(obj, &view, op == OP_READ ? 0 : 1) != 0)
        return NULL;
    if (check_off(&view, start, 8) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    struct kres r = {0};
    Py_BEGIN_ALLOW_THREADS;
    {
        char *base = (char *)view.buf;
        uint64_t off = start;
        uint64_t reg = start;
        r.t_enter = ab_now();
        ab_spin_until(deadline);
        r.t_start = ab_now();
        switch (op) {
        case OP_READ:
            for (uint64_t i = 0; i < nops; i++)
                off = *(volatile uint64_t *)(base + off);
            break;
        case OP_FAA:
            for (uint64_t i = 0; i < nops; i++)
                off = __atomic_fetch_add((uint64_t *)(base + off),
                                         (uint64_t)(int64_t)addend,
                                         __ATOMIC_SEQ_CST);
            break;
        case OP_SWP:
            for (uint64_t i = 0; i < nops; i++) {
                reg = __atomic_exchange_n((uint64_t *)(base + off), reg,
                                          __ATOMIC_SEQ_CST);
                off = reg;
            }
            break;
        }
        r.t_end = ab_now();
        r.ops = nops;
        r.successes = (op == OP_READ) ? 0 : nops;
        r.sink = off;
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&view);
    return kres_tuple(&r);
}

/* CAS over a precomputed offset walk.  The expected-value register is
 * carried across iterations, which serializes the CAS chain.
 *
 * fail mode: buffer slots hold distinct values, the carried register never
 * matches, every CAS fails and reloads the register (one fetched operand).
 * succeed mode: buffer slots hold zero, the carried register stays zero and
 * zero is stored back, so every CAS succeeds and the buffer is unchanged.
 */
static PyObject *
py_lat_walk_cas(PyObject *self, PyObject *args)
{
    PyObject *obj, *offs_obj;
    int want_fail;
    unsigned long long deadline;
    if (!PyArg_ParseTuple(args, "OOiK", &obj, &offs_obj, &want_fail,
                          &deadline))
        return NULL;
    Py_buffer view, offs;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    if (get_buffer(offs_obj, &offs, 0) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    uint64_t n = (uint64_t)offs.len / 8;
    const uint64_t *off_arr = (const uint64_t *)offs.buf;
    for (uint64_t i = 0; i < n; i++) {
        if (off_arr[i] + 8 > (uint64_t)view.len) {
            PyBuffer_Release(&offs);
            PyBuffer_Release(&view);
            PyErr_SetString(PyExc_ValueError, "walk offset out of bounds");
            return NULL;
        }
    }
    struct kres r = {0};
    Py_BEGIN_ALLOW_THREADS;
    {
        char *base = (char *)view.buf;
        uint64_t reg = want_fail ? ~0ull : 0;
        uint64_t succ = 0, fail = 0;
        r.t_enter = ab_now();
        ab_spin_until(deadline);
        r.t_start = ab_now();
        for (uint64_t i = 0; i < n; i++) {
            uint64_t *p = (uint64_t *)(base + off_arr[i]);
            uint64_t exp = reg;
            int ok = __atomic_compare_exchange_n(p, &exp, reg, 0,
                                                 __ATOMIC_SEQ_CST,
                                                 __ATOMIC_SEQ_CST);
            succ += (uint64_t)ok;
            fail += (uint64_t)!ok;
            reg = exp;
        }
        r.t_end = ab_now();
        r.ops = n;
        r.successes = succ;
        r.failures = fail;
        r.sink = reg;
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&offs);
    PyBuffer_Release(&view);
    return kres_tuple(&r);
}

#if AB_X86
/* 16-byte CAS walk: slots are 16-byte aligned pairs whose high word is
 * zero.  With want_fail the expected high word is all-ones, so the compare
 * always fails and reloads the register pair (carrying the dependency);
 * without it the buffer must be zeroed, every CAS stores zero back and the
 * carried pair stays zero. */
static PyObject *
py_lat_walk_cas128(PyObject *self, PyObject *args)
{
    PyObject *obj, *offs_obj;
    int want_fail;
    unsigned long long deadline;
    if (!PyArg_ParseTuple(args, "OOiK", &obj, &offs_obj, &want_fail,
                          &deadline))
        return NULL;
    Py_buffer view, offs;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    if (get_buffer(offs_obj, &offs, 0) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    uint64_t n = (uint64_t)offs.len / 8;
    const uint64_t *off_arr = (const uint64_t *)offs.buf;
    for (uint64_t i = 0; i < n; i++) {
        if (off_arr[i] + 16 > (uint64_t)view.len || (off_arr[i] & 15)) {
            PyBuffer_Release(&offs);
            PyBuffer_Release(&view);
            PyErr_SetString(PyExc_ValueError,
                            "cas128 offsets must be 16-byte aligned and in "
                            "bounds");
            return NULL;
        }
    }
    struct kres r = {0};
    Py_BEGIN_ALLOW_THREADS;
    {
        char *base = (char *)view.buf;
        uint64_t hi_reset = want_fail ? ~0ull : 0;
        uint64_t lo = 0, hi = hi_reset;
        uint64_t succ = 0, fail = 0;
        r.t_enter = ab_now();
        ab_spin_until(deadline);
        r.t_start = ab_now();
        for (uint64_t i = 0; i < n; i++) {
            char *p = base + off_arr[i];
            unsigned char z;
            __asm__ volatile("lock cmpxchg16b %3\n\tsetz %2"
                             : "=a"(lo), "=d"(hi), "=q"(z),
                               "+m"(*(volatile __int128 *)p)
                             : "a"(lo), "d"(hi), "b"(lo), "c"(hi)
                             : "cc", "memory");
            succ += z;
            fail += (uint64_t)(1 - z);
            /* in fail mode lo/hi were reloaded from the slot; restore the
             * never-matching expected high word for the next compare */
            if (want_fail)
                hi = hi_reset;
        }
        r.t_end = ab_now();
        r.ops = n;
        r.successes = succ;
        r.failures = fail;
        r.sink = lo;
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&offs);
    PyBuffer_Release(&view);
    return kres_tuple(&r);
}
#endif /* AB_X86 */

/* Two-operand CAS chase: the compare value is fetched from a companion
 * buffer (second memory operand), the CAS always fails, and the failed
 * CAS's result is the next slot offset (address-dependent chain). */
static PyObject *
py_lat_chase_cas2(PyObject *self, PyObject *args)
{
    PyObject *obj, *cmp_obj;
    unsigned long long start, nops, deadline;
    if (!PyArg_ParseTuple(args, "OOKKK", &obj, &cmp_obj, &start, &nops,
                          &deadline))
        return NULL;
    Py_buffer view, cmpv;
    if (get_buffer(obj, &view, 1) != 0)
        return NULL;
    if (get_buffer(cmp_obj, &cmpv, 0) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    if (cmpv.len < view.len) {
        PyBuffer_Release(&cmpv);
        PyBuffer_Release(&view);
        PyErr_SetString(PyExc_ValueError,
                        "compare buffer must cover the target buffer");
        return NULL;
    }
    if (check_off(&view, start, 8) != 0) {
        PyBuffer_Release(&cmpv);
        PyBuffer_Release(&view);
        return NULL;
    }
    struct kres r = {0};
    Py_BEGIN_ALLOW_THREADS;
    {
        char *base = (char *)view.buf;
        char *cbase = (char *)cmpv.buf;
        uint64_t off = start;
        uint64_t succ = 0, fail = 0;
        r.t_enter = ab_now();
        ab_spin_until(deadline);
        r.t_start = ab_now();
        for (uint64_t i = 0; i < nops; i++) {
            uint64_t cmp = *(volatile uint64_t *)(cbase + off);
            uint64_t *p = (uint64_t *)(base + off);
            uint64_t exp = cmp;
            int ok = __atomic_compare_exchange_n(p, &exp, cmp, 0,
                                                 __ATOMIC_SEQ_CST,
                                                 __ATOMIC_SEQ_CST);
            succ += (uint64_t)ok;
            fail += (uint64_t)!ok;
            off = exp; /* failed CAS fetched the next offset */
        }
        r.t_end = ab_now();
        r.ops = nops;
        r.successes = succ;
        r.failures = fail;
        r.sink = off;
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&cmpv);
    PyBuffer_Release(&view);
    return kres_tuple(&r);
}

/* --- bandwidth kernel: one sequential pass, no inter-op dependencies --- */

static PyObject *
py_bw_sweep(PyObject *self, PyObject *args)
{
    int op;
    PyObject *obj;
    unsigned long long stride, inject, deadline;
    long long addend;
    if (!PyArg_ParseTuple(args, "iOKLKK", &op, &obj, &stride, &addend,
                          &inject, &deadline))
        return NULL;
    if (stride < 8) {
        PyErr_SetString(PyExc_ValueError, "stride must be >= 8");
        return NULL;
    }
    Py_buffer view;
    if (get_buffer(obj, &view, op == OP_READ ? 0 : 1) != 0)
        return NULL;
    struct kres r = {0};
    Py_BEGIN_ALLOW_THREADS;
    {
        char *base = (char *)view.buf;
        Py_ssize_t len = view.len;
        uint64_t sink = 0, succ = 0, fail = 0, ops = 0;
        uint64_t reg = ~0ull; /* CAS-fail carried register */
        r.t_enter = ab_now();
        ab_spin_until(deadline);
        r.t_start = ab_now();
        switch (op) {
        case OP_READ:
            for (Py_ssize_t o = 0; o + 8 <= len; o += (Py_ssize_t)stride) {
                sink += *(volatile uint64_t *)(base + o);
                ops++;
            }
            break;
        case OP_WRITE:
            for (Py_ssize_t o = 0; o + 8 <= len; o += (Py_ssize_t)stride) {
                *(volatile uint64_t *)(base + o) = inject + (uint64_t)ops;
                ops++;
            }
            break;
        case OP_FAA:
            for (Py_ssize_t o = 0; o + 8 <= len; o += (Py_ssize_t)stride) {
                sink += __atomic_fetch_add((uint64_t *)(base + o),
                                           (uint64_t)(int64_t)addend,
                                           __ATOMIC_SEQ_CST);
                ops++;
            }
            succ = ops;
            break;
        case OP_SWP:
            for (Py_ssize_t o = 0; o + 8 <= len; o += (Py_ssize_t)stride) {
                sink += __atomic_exchange_n((uint64_t *)(base + o),
                                            inject + (uint64_t)ops,
                                            __ATOMIC_SEQ_CST);
                ops++;
            }
            succ = ops;
            break;
        case OP_CAS_SUCCEED:
            for (Py_ssize_t o = 0; o + 8 <= len; o += (Py_ssize_t)stride) {
                uint64_t exp = 0;
                int ok = __atomic_compare_exchange_n(
                    (uint64_t *)(base + o), &exp, 0, 0, __ATOMIC_SEQ_CST,
                    __ATOMIC_SEQ_CST);
                succ += (uint64_t)ok;
                fail += (uint64_t)!ok;
                ops++;
            }
            break;
        case OP_CAS_FAIL:
            for (Py_ssize_t o = 0; o + 8 <= len; o += (Py_ssize_t)stride) {
                uint64_t exp = reg;
                int ok = __atomic_compare_exchange_n(
                    (uint64_t *)(base + o), &exp, reg, 0, __ATOMIC_SEQ_CST,
                    __ATOMIC_SEQ_CST);
                succ += (uint64_t)ok;
                fail += (uint64_t)!ok;
                reg = exp;
                ops++;
            }
            break;
        }
        r.t_end = ab_now();
        r.ops = ops;
        r.successes = succ;
        r.failures = fail;
        r.sink = sink;
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&view);
    return kres_tuple(&r);
}

/* --- contention kernel: hammer one location until the stop tick --- */

static PyObject *
py_contend(PyObject *self, PyObject *args)
{
    int op;
    PyObject *obj;
    unsigned long long off, deadline, stop;
    if (!PyArg_ParseTuple(args, "iOKKK", &op, &obj, &off, &deadline, &stop))
        return NULL;
    Py_buffer view;
    if (get_buffer(obj, &view, op == OP_READ ? 0 : 1) != 0)
        return NULL;
    if (check_off(&view, off, 8) != 0) {
        PyBuffer_Release(&view);
        return NULL;
    }
    struct kres r = {0};
    Py_BEGIN_ALLOW_THREADS;
    {
        uint64_t *p = (uint64_t *)((char *)view.buf + off);
        uint64_t sink = 0, succ = 0, fail = 0, ops = 0;
        r.t_enter = ab_now();
        ab_spin_until(deadline);
        r.t_start = ab_now();
        uint64_t t = r.t_start;
        uint64_t exp = __atomic_load_n(p, __ATOMIC_SEQ_CST);
        while (t < stop) {
            /* batch of 16 ops between clock reads */
            for (int k = 0; k < 16; k++) {
                switch (op) {
                case OP_READ:
                    sink += *(volatile uint64_t *)p;
                    break;
                case OP_WRITE:
                    *(volatile uint64_t *)p = ops + (uint64_t)k;
                    break;
                case OP_FAA:
                    sink += __atomic_fetch_add(p, 1, __ATOMIC_SEQ_CST);
                    succ++;
                    break;
                case OP_SWP:
                    sink += __atomic_exchange_n(p, ops + (uint64_t)k,
                                                __ATOMIC_SEQ_CST);
                    succ++;
                    break;
                case OP_CAS: {
                    /* expected = last observed value: our own result on
                     * success, the CAS's fetched value on failure */
                    uint64_t des = exp + 1;
                    int ok = __atomic_compare_exchange_n(
                        p, &exp, des, 0, __ATOMIC_SEQ_CST, __ATOMIC_SEQ_CST);
                    if (ok)
                        exp = des;
                    succ += (uint64_t)ok;
                    fail += (uint64_t)!ok;
                    break;
                }
                }
            }
            ops += 16;
            t = ab_now();
        }
        r.t_end = t;
        r.ops = ops;
        r.successes = succ;
        r.failures = fail;
        r.sink = sink;
    }
    Py_END_ALLOW_THREADS;
    PyBuffer_Release(&view);
    return kres_tuple(&r);
}

/* --- BFS frontier expansion with atomic parent claims --- */

enum { CLAIM_CAS = 0, CLAIM_SWP = 1, CLAIM_FAA = 2 };

static PyObject *
py_bfs_level(PyObject *self, PyObject *args)
{
    int claim;
    PyObject *indptr_o, *indices_o, *parent_o, *frontier_o, *out_o, *side_o;
    unsigned long long f0, f1;
    if (!PyArg_ParseTuple(args, "iOOOOKKOO", &claim, &indptr_o, &indices_o,
                          &parent_o, &frontier_o, &f0, &f1, &out_o, &side_o))
        return NULL;
    Py_buffer indptr, indices, parent, frontier, out, side;
    if (get_buffer(indptr_o, &indptr, 0) != 0)
        return NULL;
    if (get_buffer(indices_o, &indices, 0) != 0)
        goto fail1;
    if (get_buffer(parent_o, &parent, 1) != 0)
        goto fail2;
    if (get_buffer(frontier_o, &frontier, 0) != 0)
        goto fail3;
    if (get_buffer(out_o, &out, 1) != 0)
        goto fail4;
    if (get_buffer(side_o, &side, 1) != 0)
        goto fail5;

    {
        const int64_t *ip = (const int64_t *)indptr.buf;
        const int64_t *ix = (const int64_t *)indices.buf;
        int64_t *par = (int64_t *)parent.buf;
        const int64_t *fr = (const int64_t *)frontier.buf;
        int64_t *outv = (int64_t *)out.buf;
        int64_t *sidev = (int64_t *)side.buf;
        uint64_t nvert = (uint64_t)parent.len / 8;
        uint64_t fmax = (uint64_t)frontier.len / 8;
        uint64_t outcap = (uint64_t)out.len / 8;
        uint64_t sidecap = (uint64_t)side.len / 16; /* (vertex, delta) pairs */
        uint64_t nout = 0, wins = 0, losses = 0, edges = 0, nside = 0;
        int bad = 0;

        if (f1 > fmax || f1 < f0)
            bad = 1;

        Py_BEGIN_ALLOW_THREADS;
        if (!bad) {
            for (uint64_t i = f0; i < f1; i++) {
                int64_t u = fr[i];
                if (u < 0 || (uint64_t)u >= nvert) {
                    bad = 1;
                    break;
                }
                for (int64_t e = ip[u]; e < ip[u + 1]; e++) {
                    int64_t v = ix[e];
                    edges++;
                    if (v == u)
                        continue; /* self edge */
                    if (__atomic_load_n(&par[v], __ATOMIC_RELAXED) != -1)
                        continue;
                    if (nout >= outcap || nside >= sidecap) {
                        bad = 2;
                        break;
                    }
                    switch (claim) {
                    case CLAIM_CAS: {
                        int64_t exp = -1;
                        if (__atomic_compare_exchange_n(&par[v], &exp, u, 0,
                                                        __ATOMIC_SEQ_CST,
                                                        __ATOMIC_SEQ_CST)) {
                            outv[nout++] = v;
                            wins++;
                        } else {
                            losses++;
                        }
                        break;
                    }
                    case CLAIM_SWP: {
                        int64_t old = __atomic_exchange_n(&par[v], u,
                                                          __ATOMIC_SEQ_CST);
                        if (old == -1) {
                            outv[nout++] = v;
                            wins++;
                        } else {
                            /* another same-level claim was overwritten;
                             * both parents are valid, no restore needed */
                            losses++;
                        }
                        break;
                    }
                    case CLAIM_FAA: {
                        int64_t old = __atomic_fetch_add(&par[v], u + 1,
                                                         __ATOMIC_SEQ_CST);
                        if (old == -1) {
                            outv[nout++] = v;
                            wins++;
                        } else {
                            /* conflicting add: remember (v, delta) so the
                             * caller can revert it after the level barrier */
                            sidev[2 * nside] = v;
                            sidev[2 * nside + 1] = u + 1;
                            nside++;
                            losses++;
                        }
                        break;
                    }
                    }
                }
                if (bad)
                    break;
            }
        }
        Py_END_ALLOW_THREADS;

        PyBuffer_Release(&side);
        PyBuffer_Release(&out);
        PyBuffer_Release(&frontier);
        PyBuffer_Release(&parent);
        PyBuffer_Release(&indices);
        PyBuffer_Release(&indptr);

        if (bad == 1) {
            PyErr_SetString(PyExc_ValueError, "frontier or vertex out of range");
            return NULL;
        }
        if (bad == 2) {
            PyErr_SetString(PyExc_ValueError, "output buffer too small");
            return NULL;
        }
        return Py_BuildValue("(KKKKK)", (unsigned long long)nout,
                             (unsigned long long)wins,
                             (unsigned long long)losses,
                             (unsigned long long)edges,
                             (unsigned long long)nside);
    }

fail5:
    PyBuffer_Release(&out);
fail4:
    PyBuffer_Release(&frontier);
fail3:
    PyBuffer_Release(&parent);
fail2:
    PyBuffer_Release(&indices);
fail1:
    PyBuffer_Release(&indptr);
    return NULL;
}

/* ----------------------------------------------------------- module def */

static PyMethodDef ab_methods[] = {
    {"now", py_now, METH_NOARGS, "Current tick count (serialized)."},
    {"timer_source", py_timer_source, METH_NOARGS,
     "'tsc' or 'monotonic' depending on the active tick source."},
    {"arch", py_arch, METH_NOARGS, "Compiled architecture family."},
    {"has_cas128", py_has_cas128, METH_NOARGS,
     "Whether 16-byte compare-and-swap is available."},
    {"cas64", py_cas64, METH_VARARGS,
     "cas64(buf, off, expected, desired) -> (ok, old)"},
    {"faa64", py_faa64, METH_VARARGS, "faa64(buf, off, addend) -> old"},
    {"swp64", py_swp64, METH_VARARGS, "swp64(buf, off, value) -> old"},
    {"load64", py_load64, METH_VARARGS, "load64(buf, off) -> value"},
    {"store64", py_store64, METH_VARARGS, "store64(buf, off, value)"},
    {"flush_lines", py_flush_lines, METH_VARARGS,
     "Flush every cache line of buf; returns False when unsupported."},
    {"read_sweep", py_read_sweep, METH_VARARGS,
     "Load one word per stride; returns a checksum."},
    {"rewrite_lines", py_rewrite_lines, METH_VARARGS,
     "Dirty every line without changing contents."},
    {"touch_pages", py_touch_pages, METH_VARARGS,
     "Read one byte per page; returns the page count."},
    {"lat_chase", py_lat_chase, METH_VARARGS,
     "lat_chase(op, buf, start, nops, addend, deadline) -> result"},
    {"lat_walk_cas", py_lat_walk_cas, METH_VARARGS,
     "lat_walk_cas(buf, offsets, want_fail, deadline) -> result"},
#if AB_X86
    {"lat_walk_cas128", py_lat_walk_cas128, METH_VARARGS,
     "lat_walk_cas128(buf, offsets, deadline) -> result"},
#endif
    {"lat_chase_cas2", py_lat_chase_cas2, METH_VARARGS,
     "lat_chase_cas2(buf, cmpbuf, start, nops, deadline) -> result"},
    {"bw_sweep", py_bw_sweep, METH_VARARGS,
     "bw_sweep(op, buf, stride, addend, inject, deadline) -> result"},
    {"contend", py_contend, METH_VARARGS,
     "contend(op, buf, off, deadline, stop) -> result"},
    {"bfs_level", py_bfs_level, METH_VARARGS,
     "bfs_level(claim, indptr, indices, parent, frontier, f0, f1, out, side)"},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef ab_module = {
    PyModuleDef_HEAD_INIT, "_kernels",
    "Native measured loops for atomic-operation benchmarks.", -1, ab_methods,
};

PyMODINIT_FUNC
PyInit__kernels(void)
{
    /* Prefer the TSC only when the CPU advertises an invariant one; an
     * environment override helps testing both paths. */
#if AB_X86
    unsigned eax, ebx, ecx, edx;
    if (__get_cpuid(0x80000007, &eax, &ebx, &ecx, &edx) && ((edx >> 8) & 1))
        ab_use_tsc = 1;
#endif
    const char *force = getenv("ATOMICBENCH_TIMER");
    if (force != NULL) {
        if (strcmp(force, "monotonic") == 0)
            ab_use_tsc = 0;
#if AB_X86
        else if (strcmp(force, "tsc") == 0)
            ab_use_tsc = 1;
#endif
    }

    PyObject *m = PyModule_Create(&ab_module);
    if (m == NULL)
        return NULL;
    PyModule_AddIntConstant(m, "OP_READ", OP_READ);
    PyModule_AddIntConstant(m, "OP_WRITE", OP_WRITE);
    PyModule_AddIntConstant(m, "OP_CAS", OP_CAS);
    PyModule_AddIntConstant(m, "OP_FAA", OP_FAA);
    PyModule_AddIntConstant(m, "OP_SWP", OP_SWP);
    PyModule_AddIntConstant(m, "OP_CAS_SUCCEED", OP_CAS_SUCCEED);
    PyModule_AddIntConstant(m, "OP_CAS_FAIL", OP_CAS_FAIL);
    PyModule_AddIntConstant(m, "CLAIM_CAS", CLAIM_CAS);
    PyModule_AddIntConstant(m, "CLAIM_SWP", CLAIM_SWP);
    PyModule_AddIntConstant(m, "CLAIM_FAA", CLAIM_FAA);
    return m;
}
