/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    frameRgba(layer: string, frame: number): Uint8Array;
    frames(): number;
    constructor(size: number, frames: number);
    patternCount(): number;
    patternLabel(id: number): string;
    /**
     * `[mare, ssim2d, ssim3d]` of the cluttered input, followed by the same
     * three for the filtered output when there is one.
     */
    scores(): Float64Array;
    simulate(pattern_id: number, seed: number): void;
    size(): number;
    svdFilter(roi: number, drop_count: number): void;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_frameRgba: (a: number, b: number, c: number, d: number) => [number, number];
    readonly demo_frames: (a: number) => number;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_patternCount: (a: number) => number;
    readonly demo_patternLabel: (a: number, b: number) => [number, number];
    readonly demo_scores: (a: number) => [number, number, number, number];
    readonly demo_simulate: (a: number, b: number, c: number) => [number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_svdFilter: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
