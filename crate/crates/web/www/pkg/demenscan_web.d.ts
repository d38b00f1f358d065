/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    addImage(bytes: Uint8Array): number;
    classNames(): string[];
    /**
     * Concatenated maps; the side length is `imageSize >> (layer - 1)`.
     */
    featureMaps(i: number, layer: number, n: number): Uint8Array;
    /**
     * Filter grid as `[width, height, pixels...]` packed little-endian in the first 8 bytes.
     */
    filterGrid(layer: number, n: number, scale: number): Uint8Array;
    /**
     * Class name of a phantom; empty for uploads.
     */
    galleryLabel(i: number): string;
    galleryLen(): number;
    imagePixels(i: number): Uint8Array;
    imageSize(): number;
    constructor(seed: number);
    probabilities(i: number): Float32Array;
    saliency(i: number, _class: number): Uint8Array;
    /**
     * Train `n` more epochs; returns every epoch's metrics as JSON lines.
     */
    trainEpochs(n: number): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_addImage: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_classNames: (a: number) => [number, number];
    readonly demo_featureMaps: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_filterGrid: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_galleryLabel: (a: number, b: number) => [number, number];
    readonly demo_galleryLen: (a: number) => number;
    readonly demo_imagePixels: (a: number, b: number) => [number, number, number, number];
    readonly demo_imageSize: (a: number) => number;
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_probabilities: (a: number, b: number) => [number, number, number, number];
    readonly demo_saliency: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_trainEpochs: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
